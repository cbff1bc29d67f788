import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from compolattice.composition import acd
from compolattice.lattice import assemble_Q, build_lattice
from compolattice.likelihood import HyperParams, ModelState
from compolattice.sampler import SamplerConfig
from compolattice.validation import (
    compare_to_reference,
    cross_validate,
    kfold_assignments,
    make_synthetic_problem,
    simulate_dataset,
    simulate_gaussian_field,
)


def test_huge_alpha_observations_equal_truth(rng):
    lat = build_lattice(5, 5).with_data(obs_index=np.arange(0, 25, 2))
    truth = ModelState(beta=np.array([0.3, -0.2]), alpha=1e8, kappa=0.5,
                       rho=np.array([[0.5, 0.1], [0.1, 0.4]]))
    ds = simulate_dataset(lat, truth, rng)
    np.testing.assert_allclose(ds.Y, ds.z_all[lat.obs_index], atol=1e-3)
    assert ds.truth.X.shape == (50,)


def test_field_covariance_matches_kronecker(rng):
    lat = build_lattice(3, 3)
    kappa = 0.8
    rho = np.array([[1.0, 0.6], [0.6, 0.9]])
    draws = np.array([simulate_gaussian_field(lat, kappa, rho, rng) for _ in range(40_000)])
    cov = np.kron(rho, np.linalg.inv(assemble_Q(lat, kappa).toarray()))
    emp = np.cov(draws, rowvar=False)
    se = np.sqrt((cov ** 2 + np.outer(np.diag(cov), np.diag(cov))) / len(draws))
    assert np.all(np.abs(emp - cov) < 5 * se)


def test_regression_only_generator_has_no_field(rng):
    lat = build_lattice(3, 3).with_data(obs_index=[0, 4, 8])
    ds = simulate_dataset(lat, ModelState(beta=np.array([0.5, -0.5]), alpha=5.0), rng)
    assert ds.truth.X is None
    np.testing.assert_allclose(ds.eta_all, np.tile([0.5, -0.5], (9, 1)))


def test_make_synthetic_problem_shapes():
    ds = make_synthetic_problem(5, 6, 12, D=4, n_covariates=2, seed=3)
    assert ds.lattice.N == 30 and ds.lattice.n_obs == 12 and ds.lattice.p == 3
    assert ds.Y.shape == (12, 4) and ds.z_all.shape == (30, 4)
    np.testing.assert_allclose(ds.Y.sum(axis=1), 1.0)
    X, y = ds.as_cells()
    assert X.shape == (30, 4)
    assert np.isnan(y).all(axis=1).sum() == 18
    np.testing.assert_array_equal(y[ds.lattice.obs_index], ds.Y)
    with pytest.raises(ValueError):
        make_synthetic_problem(2, 2, 5)


def test_make_synthetic_problem_reproducible():
    a = make_synthetic_problem(4, 4, 6, seed=9)
    b = make_synthetic_problem(4, 4, 6, seed=9)
    np.testing.assert_array_equal(a.Y, b.Y)
    np.testing.assert_array_equal(a.truth.X, b.truth.X)


# -- folds -------------------------------------------------------------------------

@given(st.integers(20, 300), st.integers(1, 20), st.integers(0, 2**32 - 1))
def test_kfold_partition(n_obs, k, seed):
    folds = kfold_assignments(n_obs, k, np.random.default_rng(seed))
    assert len(folds) == k
    allidx = np.concatenate(folds)
    np.testing.assert_array_equal(np.sort(allidx), np.arange(n_obs))
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    assert min(sizes) >= 1


@pytest.mark.parametrize("n_obs, k", [(5, 6), (5, 0)])
def test_kfold_rejects(n_obs, k, rng):
    with pytest.raises(ValueError):
        kfold_assignments(n_obs, k, rng)


# -- cross-validation --------------------------------------------------------------

@pytest.fixture(scope="module")
def cv_problem():
    ds = make_synthetic_problem(5, 5, 14, seed=4)
    return ds.lattice, ds.Y


def test_perfect_predictor_scores_zero(cv_problem):
    lat, Y = cv_problem
    by_node = dict(zip(lat.obs_index.tolist(), Y))

    def oracle(sub, Y_train, test_nodes, hp, config):
        return np.array([by_node[n] for n in test_nodes.tolist()])

    report = cross_validate(lat, Y, HyperParams(), SamplerConfig(n_iter=2, burn_in=0), k=6,
                            repeats=3, variants=("full",), fit_predict=oracle)
    np.testing.assert_allclose(report.repeat_errors["full"], 0.0, atol=1e-12)
    assert report.mean("full") == pytest.approx(0.0, abs=1e-12)


def test_constant_predictor_matches_loop_oracle(cv_problem):
    lat, Y = cv_problem
    centre = Y.mean(axis=0)

    def constant(sub, Y_train, test_nodes, hp, config):
        return np.tile(centre, (len(test_nodes), 1))

    report = cross_validate(lat, Y, HyperParams(), SamplerConfig(n_iter=2, burn_in=0, seed=5),
                            k=4, repeats=3, variants=("full", "regression_only"),
                            fit_predict=constant)
    for r, part in enumerate(report.folds):
        total, count = 0.0, 0
        for f, fold in enumerate(part):
            dists = [acd(centre, Y[i]) for i in fold]
            assert report.fold_errors["full"][r, f] == pytest.approx(np.mean(dists), rel=1e-12)
            total += sum(dists)
            count += len(dists)
        assert report.repeat_errors["full"][r] == pytest.approx(total / count, rel=1e-12)
    np.testing.assert_array_equal(report.repeat_errors["full"], report.repeat_errors["regression_only"])
    d = report.to_dict()
    assert set(d["summary"]) == {"full", "regression_only"}


def test_cv_refits_on_training_cells_only(cv_problem):
    lat, Y = cv_problem
    seen = []

    def spy(sub, Y_train, test_nodes, hp, config):
        assert not set(sub.obs_index.tolist()) & set(test_nodes.tolist())
        assert len(sub.obs_index) + len(test_nodes) == lat.n_obs
        assert len(Y_train) == sub.n_obs
        seen.append(config.seed)
        return np.tile(Y.mean(axis=0), (len(test_nodes), 1))

    cross_validate(lat, Y, HyperParams(), SamplerConfig(n_iter=2, burn_in=0), k=3, repeats=2,
                   variants=("full",), fit_predict=spy)
    assert len(seen) == 6 and len(set(seen)) == 6


def test_cv_deterministic_with_mcmc(cv_problem):
    lat, Y = cv_problem
    cfg = SamplerConfig(n_iter=40, burn_in=20, seed=3)
    a = cross_validate(lat, Y, HyperParams(), cfg, k=3, repeats=2)
    b = cross_validate(lat, Y, HyperParams(), cfg, k=3, repeats=2)
    for v in ("full", "regression_only"):
        np.testing.assert_array_equal(a.fold_errors[v], b.fold_errors[v])
        assert np.all(a.fold_errors[v] > 0)
    assert a.folds == b.folds


def test_cv_rejects_mismatched_data(cv_problem):
    lat, Y = cv_problem
    with pytest.raises(ValueError):
        cross_validate(lat, Y[:-1], HyperParams(), SamplerConfig(n_iter=2, burn_in=0))
    with pytest.raises(ValueError):
        cross_validate(lat, Y, HyperParams(), SamplerConfig(n_iter=2, burn_in=0), k=lat.n_obs + 1)


# -- map comparison ---------------------------------------------------------------

def test_compare_single_cell_equals_acd():
    u, v = np.array([[0.2, 0.3, 0.5]]), np.array([[0.4, 0.4, 0.2]])
    assert compare_to_reference(u, v) == pytest.approx(acd(u[0], v[0]), rel=1e-15)


def test_compare_identical_maps(rng):
    z = rng.dirichlet(np.ones(3), size=10)
    assert compare_to_reference(z, z) == 0.0


def test_compare_rejects_mismatch(rng):
    with pytest.raises(ValueError):
        compare_to_reference(rng.dirichlet(np.ones(3), 4), rng.dirichlet(np.ones(3), 5))
