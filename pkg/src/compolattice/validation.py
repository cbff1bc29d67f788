"""Synthetic data from the generative model, repeated k-fold cross-validation
scored by compositional distance, and map-to-map comparison.
"""
from __future__ import annotations

import dataclasses
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .composition import acd, inv_alr
from .lattice import LatticeModel, assemble_Q, build_lattice, factorize
from .likelihood import HyperParams, ModelState
from .sampler import SamplerConfig, run_chain

logger = logging.getLogger(__name__)

__all__ = [
    "CvReport",
    "SyntheticDataset",
    "compare_to_reference",
    "cross_validate",
    "kfold_assignments",
    "make_synthetic_problem",
    "simulate_dataset",
]


@dataclass
class SyntheticDataset:
    """Observations plus the hidden truth that generated them."""

    lattice: LatticeModel
    Y: np.ndarray                 # (N_o, D) observed compositions
    truth: ModelState             # includes the drawn X
    eta_all: np.ndarray           # (N, d) true latent log-ratios
    z_all: np.ndarray             # (N, D) true compositions

    def as_cells(self):
        """``(X, y)`` in estimator layout: ``X = [row, col, covariates]`` for
        every cell, ``y`` NaN at unobserved cells."""
        lat = self.lattice
        X = np.column_stack([lat.rows, lat.cols, lat.B[:, 1:]]).astype(float)
        y = np.full((lat.N, self.Y.shape[1]), np.nan)
        y[lat.obs_index] = self.Y
        return X, y


def simulate_gaussian_field(lattice: LatticeModel, kappa: float, rho, rng) -> np.ndarray:
    """Draw ``X ~ N(0, rho kron Q(kappa)^-1)``, returned field-major."""
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    d = rho.shape[0]
    factor = factorize(assemble_Q(lattice, kappa))
    W = np.column_stack([factor.inv_sqrt_t_matvec(rng.standard_normal(lattice.N))
                         for _ in range(d)])
    # columns of W are iid N(0, Q^-1); mixing by chol(rho) gives rho kron Q^-1
    x = W @ np.linalg.cholesky(rho).T
    return x.T.ravel()


def simulate_dataset(lattice: LatticeModel, true_state: ModelState, rng,
                     D: Optional[int] = None) -> SyntheticDataset:
    """Forward-simulate the hierarchical model at ``lattice.obs_index``.

    A fresh spatial field is drawn from its prior; ``true_state.X`` is
    ignored. With ``true_state.rho is None`` the field is zero
    (regression-only generative model).
    """
    p = lattice.p
    d = len(true_state.beta) // p if D is None else D - 1
    beta = np.asarray(true_state.beta, dtype=float).reshape(d, p)
    if true_state.rho is not None:
        X = simulate_gaussian_field(lattice, true_state.kappa, true_state.rho, rng)
    else:
        X = np.zeros(lattice.N * d)
    eta_all = lattice.B @ beta.T + X.reshape(d, lattice.N).T
    z_all = inv_alr(eta_all)
    z_obs = z_all[lattice.obs_index]
    g = rng.gamma(true_state.alpha * z_obs)
    g = np.maximum(g, np.finfo(float).tiny)
    Y = g / g.sum(axis=1, keepdims=True)
    truth = dataclasses.replace(true_state.copy(), X=X if true_state.rho is not None else None)
    return SyntheticDataset(lattice, Y, truth, eta_all, z_all)


def make_synthetic_problem(n_rows: int, n_cols: int, n_obs: int, *, D: int = 3,
                           n_covariates: int = 1, alpha: float = 8.0, kappa: float = 0.25,
                           rho=None, beta=None, seed: int = 0) -> SyntheticDataset:
    """Random lattice problem: iid standard-normal covariates plus intercept,
    ``n_obs`` observed cells chosen uniformly without replacement.
    """
    rng = np.random.default_rng(seed)
    d = D - 1
    lattice = build_lattice(n_rows, n_cols)
    if n_obs > lattice.N:
        raise ValueError("more observations than lattice nodes")
    B = np.column_stack([np.ones(lattice.N), rng.standard_normal((lattice.N, n_covariates))])
    obs = np.sort(rng.choice(lattice.N, size=n_obs, replace=False))
    lattice = lattice.with_data(obs_index=obs, B=B)
    if rho is None:
        rho = 0.5 * np.eye(d) + 0.2 * (np.ones((d, d)) - np.eye(d))
    if beta is None:
        beta = rng.normal(0.0, 0.5, size=d * lattice.p)
    truth = ModelState(beta=np.asarray(beta, dtype=float), alpha=alpha, kappa=kappa,
                       rho=np.atleast_2d(np.asarray(rho, dtype=float)))
    return simulate_dataset(lattice, truth, rng)


def compare_to_reference(predicted, reference) -> float:
    """Mean compositional distance between two maps over the same cells."""
    predicted = np.asarray(predicted, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if predicted.shape != reference.shape:
        raise ValueError(f"cell mismatch: {predicted.shape} vs {reference.shape}")
    return float(np.mean(np.atleast_1d(acd(predicted, reference))))


def kfold_assignments(n_obs: int, k: int, rng: np.random.Generator) -> list:
    """Random partition of ``range(n_obs)`` into ``k`` folds differing in size by <= 1."""
    if not 1 <= k <= n_obs:
        raise ValueError(f"need 1 <= k <= n_obs, got k={k}, n_obs={n_obs}")
    return [np.sort(f) for f in np.array_split(rng.permutation(n_obs), k)]


@dataclass
class CvReport:
    """Per repeat and fold mean distance for each model variant.

    ``fold_errors[variant]`` has shape ``(repeats, k)``;
    ``repeat_errors[variant]`` is the mean over all held-out cells per repeat.
    """

    k: int
    repeats: int
    fold_errors: dict
    repeat_errors: dict
    folds: list = field(default_factory=list)
    chain: dict = field(default_factory=dict)

    def mean(self, variant: str) -> float:
        return float(np.mean(self.repeat_errors[variant]))

    def std(self, variant: str) -> float:
        r = self.repeat_errors[variant]
        return float(np.std(r, ddof=1)) if len(r) > 1 else 0.0

    def to_dict(self) -> dict:
        return dict(
            k=self.k, repeats=self.repeats, chain=self.chain,
            summary={v: dict(mean=self.mean(v), sd=self.std(v)) for v in self.repeat_errors},
            repeat_errors={v: np.asarray(e).tolist() for v, e in self.repeat_errors.items()},
            fold_errors={v: np.asarray(e).tolist() for v, e in self.fold_errors.items()},
        )


def posterior_mean_fit_predict(lattice: LatticeModel, Y_train, test_nodes, hp: HyperParams,
                               config: SamplerConfig) -> np.ndarray:
    """Default CV predictor: fit the chain, return posterior-mean compositions."""
    from .inference import posterior_mean_compositions

    trace = run_chain(lattice, Y_train, hp, config)
    return posterior_mean_compositions(trace, nodes=test_nodes)


def _cv_job(args):
    lattice, Y, hp, config, train, test, fit_predict = args
    sub = lattice.with_data(obs_index=lattice.obs_index[train])
    pred = fit_predict(sub, Y[train], lattice.obs_index[test], hp, config)
    return np.atleast_1d(acd(pred, Y[test]))


def _job_seed(master_seed: int, repeat: int, fold: int, variant_idx: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(repeat, fold, variant_idx))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def cross_validate(lattice: LatticeModel, Y, hp: HyperParams, config: SamplerConfig,
                   k: int = 6, repeats: int = 10,
                   variants: Sequence[str] = ("full", "regression_only"),
                   fit_predict: Optional[Callable] = None,
                   n_jobs: Optional[int] = None) -> CvReport:
    """Repeated k-fold cross-validation over the observed cells.

    For every repeat a fresh random partition is drawn from ``config.seed``;
    each fold is refit on the remaining cells and scored by the distance
    between predicted and held-out compositions. ``fit_predict(lattice,
    Y_train, test_nodes, hp, config)`` may replace the MCMC predictor.
    """
    Y = np.asarray(Y, dtype=float)
    n_obs = lattice.n_obs
    if Y.shape[0] != n_obs:
        raise ValueError("Y must have one row per observed cell")
    fit_predict = fit_predict or posterior_mean_fit_predict
    if n_jobs is None:
        n_jobs = int(os.environ.get("COMPOLATTICE_THREADS", "1") or 1)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(2**31,)))
    folds = [kfold_assignments(n_obs, k, rng) for _ in range(repeats)]
    for part in folds:
        if any(len(f) < 1 for f in part):
            raise ValueError("every fold needs at least one cell")

    jobs, keys = [], []
    for vi, variant in enumerate(variants):
        for r, part in enumerate(folds):
            for f, test in enumerate(part):
                train = np.setdiff1d(np.arange(n_obs), test)
                cfg = dataclasses.replace(config, model_variant=variant,
                                          seed=_job_seed(config.seed, r, f, vi))
                jobs.append((lattice, Y, hp, cfg, train, test, fit_predict))
                keys.append((variant, r, f))
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_cv_job, jobs))
    else:
        results = []
        for i, job in enumerate(jobs):
            results.append(_cv_job(job))
            logger.info("cv job %d/%d done (%s repeat %d fold %d)", i + 1, len(jobs), *keys[i])

    fold_errors = {v: np.zeros((repeats, k)) for v in variants}
    cell_errors = {v: [[None] * k for _ in range(repeats)] for v in variants}
    for (variant, r, f), dist in zip(keys, results):
        fold_errors[variant][r, f] = float(np.mean(dist))
        cell_errors[variant][r][f] = dist
    repeat_errors = {
        v: np.array([np.mean(np.concatenate(cell_errors[v][r])) for r in range(repeats)])
        for v in variants
    }
    return CvReport(k=k, repeats=repeats, fold_errors=fold_errors,
                    repeat_errors=repeat_errors,
                    folds=[[f.tolist() for f in part] for part in folds],
                    chain=dict(n_iter=config.n_iter, burn_in=config.burn_in,
                               thin=config.thin, seed=config.seed))
