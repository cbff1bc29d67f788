from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from compolattice.lattice import build_lattice
from compolattice.likelihood import HyperParams, ModelState

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def hp():
    return HyperParams()


@pytest.fixture
def data_dir():
    return DATA_DIR


def small_problem(n_rows=3, n_cols=3, n_obs=4, D=3, p=2, seed=0, alpha=6.0, kappa=0.7):
    """Lattice, observations and a random spatial state for derivative checks."""
    rng = np.random.default_rng(seed)
    d = D - 1
    lat = build_lattice(n_rows, n_cols)
    B = np.column_stack([np.ones(lat.N), rng.standard_normal((lat.N, p - 1))])
    obs = np.sort(rng.choice(lat.N, size=n_obs, replace=False))
    lat = lat.with_data(obs_index=obs, B=B)
    Y = rng.dirichlet(np.full(D, 3.0), size=n_obs)
    A = rng.standard_normal((d, d))
    state = ModelState(beta=0.3 * rng.standard_normal(d * p), alpha=alpha,
                       X=0.5 * rng.standard_normal(d * lat.N), kappa=kappa,
                       rho=A @ A.T + d * np.eye(d))
    return lat, Y, state


@pytest.fixture
def problem():
    return small_problem()


# one line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES = []


def record_acceptance(criterion, passed, detail):
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)
