"""Dirichlet observation model and the (X, beta, alpha) log-posterior.

The MALA block works on ``theta = (X, beta, alpha)`` stacked as

* ``X``     -- ``N*d`` latent field values, field-major;
* ``beta``  -- ``d*p`` regression coefficients, ``beta[k*p + j]`` for field k;
* ``alpha`` -- the Dirichlet scale.

In the regression-only variant ``X`` is absent (``state.X is None``).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.special import digamma, gammaln, polygamma

from .composition import d_inv_alr, inv_alr
from .lattice import LatticeModel, assemble_Q

__all__ = [
    "HyperParams",
    "ModelState",
    "dirichlet_loglik",
    "eta_observed",
    "fisher_information",
    "grad_log_posterior",
    "log_posterior",
]

ALPHA_INFO_FLOOR = 1e-8


def trigamma(x):
    return polygamma(1, x)


@dataclass(frozen=True)
class HyperParams:
    """Prior hyperparameters; defaults are weakly informative.

    Gamma priors are shape/rate, the inverse-Wishart prior on ``rho`` is
    ``IW(a_rho * I, b_rho)``.
    """

    a_alpha: float = 1.5
    b_alpha: float = 0.1
    a_kappa: float = 1.0
    b_kappa: float = math.log(100.0) / math.sqrt(8.0)
    a_rho: float = 1.0
    b_rho: float = 10.0
    q_beta: float = 1e-3

    def validate(self, d: Optional[int] = None) -> "HyperParams":
        for name, value in dataclasses.asdict(self).items():
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"hyperparameter {name} must be positive, got {value}")
        if d is not None and not self.b_rho > d - 1:
            raise ValueError(f"b_rho={self.b_rho} gives an improper IW prior for d={d}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class ModelState:
    """Current values of all unknowns.

    ``X``, ``kappa`` and ``rho`` are ``None`` for the regression-only model.
    """

    beta: np.ndarray
    alpha: float
    X: Optional[np.ndarray] = None
    kappa: Optional[float] = None
    rho: Optional[np.ndarray] = None

    @property
    def spatial(self) -> bool:
        return self.X is not None

    def theta(self) -> np.ndarray:
        """Stack ``(X, beta, alpha)`` into the MALA coordinate vector."""
        parts = [self.X] if self.spatial else []
        return np.concatenate(parts + [self.beta, [self.alpha]])

    def with_theta(self, theta: np.ndarray) -> "ModelState":
        n_x = len(self.X) if self.spatial else 0
        n_b = len(self.beta)
        return dataclasses.replace(
            self,
            X=theta[:n_x].copy() if self.spatial else None,
            beta=theta[n_x:n_x + n_b].copy(),
            alpha=float(theta[n_x + n_b]),
        )

    def copy(self) -> "ModelState":
        return ModelState(
            beta=self.beta.copy(), alpha=float(self.alpha),
            X=None if self.X is None else self.X.copy(),
            kappa=self.kappa,
            rho=None if self.rho is None else np.array(self.rho, copy=True),
        )

    def check(self, lattice: LatticeModel, d: int):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.beta.shape != (d * lattice.p,):
            raise ValueError(f"beta must have length d*p = {d * lattice.p}")
        if self.spatial:
            if self.X.shape != (d * lattice.N,):
                raise ValueError(f"X must have length N*d = {d * lattice.N}")
            if not (self.kappa is not None and self.kappa > 0):
                raise ValueError("kappa must be positive")
            rho = np.atleast_2d(self.rho)
            if rho.shape != (d, d):
                raise ValueError("rho must be d x d")
            np.linalg.cholesky(rho)
        return self


def dirichlet_loglik(y, z, alpha):
    """Dirichlet log-density of ``y`` with mean ``z`` and scale ``alpha``.

    ``logG(alpha) - sum_k logG(alpha z_k) + sum_k (alpha z_k - 1) log y_k``.
    Vectorized over leading axes.
    """
    y = np.asarray(y, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(y <= 0) or np.any(z <= 0):
        raise ValueError("y and z must lie strictly inside the simplex")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    az = alpha * z
    out = gammaln(alpha) - np.sum(gammaln(az), axis=-1) + np.sum((az - 1.0) * np.log(y), axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def eta_observed(state: ModelState, lattice: LatticeModel, d: int) -> np.ndarray:
    """Latent log-ratio field at the observed nodes, shape ``(N_o, d)``."""
    obs = lattice.obs_index
    beta = state.beta.reshape(d, lattice.p)
    eta = lattice.B[obs] @ beta.T
    if state.spatial:
        eta = eta + state.X.reshape(d, lattice.N)[:, obs].T
    return eta


def _gaussian_quadratic(state, lattice, d, Q):
    """Return ``(X^T (rho^-1 kron Q) X, vec(Q x rho^-1))``."""
    x = state.X.reshape(d, lattice.N).T
    Qx = Q @ x
    rho_inv = np.linalg.inv(np.atleast_2d(state.rho))
    grad = (Qx @ rho_inv).T.ravel()
    return float(state.X @ grad), grad


def _y_dims(Y, lattice):
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != lattice.n_obs:
        raise ValueError(f"Y must have shape (N_o={lattice.n_obs}, D)")
    return Y, Y.shape[1] - 1


def log_posterior(state: ModelState, lattice: LatticeModel, Y, hp: HyperParams,
                  Q=None) -> float:
    """Log of the (X, beta, alpha | kappa, rho, Y) density up to a constant.

    Returns ``-inf`` for ``alpha <= 0``. ``Q`` may be passed to skip
    reassembling ``Q(kappa)``.
    """
    Y, d = _y_dims(Y, lattice)
    alpha = state.alpha
    if not alpha > 0 or not np.isfinite(alpha):
        return -np.inf
    eta = eta_observed(state, lattice, d)
    if not np.all(np.isfinite(eta)):
        return -np.inf
    z = inv_alr(eta)
    if np.any(z <= 0):
        return -np.inf
    value = float(np.sum(dirichlet_loglik(Y, z, alpha))) if lattice.n_obs else 0.0
    if state.spatial:
        if Q is None:
            Q = assemble_Q(lattice, state.kappa)
        quad, _ = _gaussian_quadratic(state, lattice, d, Q)
        value -= 0.5 * quad
    value -= 0.5 * hp.q_beta * float(state.beta @ state.beta)
    value += (hp.a_alpha - 1.0) * math.log(alpha) - alpha * hp.b_alpha
    return value


def _site_terms(state, lattice, Y, d):
    eta = eta_observed(state, lattice, d)
    z = inv_alr(eta)
    J = d_inv_alr(z)                       # (N_o, d, D)
    return z, J


def grad_log_posterior(state: ModelState, lattice: LatticeModel, Y, hp: HyperParams,
                       Q=None) -> np.ndarray:
    """Gradient of :func:`log_posterior` with respect to ``(X, beta, alpha)``."""
    Y, d = _y_dims(Y, lattice)
    alpha = state.alpha
    N = lattice.N
    obs = lattice.obs_index
    z, J = _site_terms(state, lattice, Y, d)
    logy = np.log(Y)
    # d loglik / d eta_{s,k} = alpha * sum_l (log y_l - psi(alpha z_l)) dz_l/deta_k
    w = logy - digamma(alpha * z)
    g_eta = alpha * np.einsum("sl,skl->sk", w, J)

    g_beta = (lattice.B[obs].T @ g_eta).T.ravel() - hp.q_beta * state.beta
    n_o = lattice.n_obs
    g_alpha = (n_o * digamma(alpha) - np.sum(z * digamma(alpha * z)) + np.sum(z * logy)
               + (hp.a_alpha - 1.0) / alpha - hp.b_alpha)
    if not state.spatial:
        return np.concatenate([g_beta, [g_alpha]])
    if Q is None:
        Q = assemble_Q(lattice, state.kappa)
    _, prior_grad = _gaussian_quadratic(state, lattice, d, Q)
    g_x = np.zeros((d, N))
    g_x[:, obs] = g_eta.T
    return np.concatenate([g_x.ravel() - prior_grad, g_beta, [g_alpha]])


@dataclass
class _FisherLayout:
    """Fixed CSC structure of the information matrix for one design.

    Contributions arrive as a flat value vector in a fixed order (prior
    ``rho^-1 kron Q`` entries first, then the upper-triangular data entries
    and their mirror images); ``inverse`` maps each to its CSC slot.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    inverse: np.ndarray
    mirror: np.ndarray       # off-diagonal mask of the upper-triangular data entries

    @property
    def nnz(self) -> int:
        return len(self.indices)


def _data_positions(N, p, d, obs, spatial):
    """Row/column indices of the upper-triangular data entries, in the
    order produced by :func:`_data_values`."""
    n_x = N * d if spatial else 0
    n_b = d * p
    i_alpha = n_x + n_b
    iu = np.triu_indices(n_b)
    rows = [n_x + iu[0], n_x + np.arange(n_b), [i_alpha]]
    cols = [n_x + iu[1], np.full(n_b, i_alpha), [i_alpha]]
    if spatial:
        n_o = len(obs)
        kk, mm = np.triu_indices(d)
        rows.append((kk[None, :] * N + obs[:, None]).ravel())
        cols.append((mm[None, :] * N + obs[:, None]).ravel())
        k_idx, m_idx, j_idx = (a.ravel() for a in np.meshgrid(
            np.arange(d), np.arange(d), np.arange(p), indexing="ij"))
        rows.append((k_idx[None, :] * N + obs[:, None]).ravel())
        cols.append(np.broadcast_to(n_x + m_idx * p + j_idx, (n_o, len(k_idx))).ravel())
        rows.append((np.arange(d)[None, :] * N + obs[:, None]).ravel())
        cols.append(np.full(n_o * d, i_alpha))
    return (np.concatenate([np.asarray(r, dtype=np.int64) for r in rows]),
            np.concatenate([np.asarray(c, dtype=np.int64) for c in cols]))


def _fisher_layout(lattice: LatticeModel, d: int, spatial: bool) -> _FisherLayout:
    key = ("fisher", d, spatial, lattice.p)
    cache = lattice.cache
    if key in cache:
        return cache[key]
    N, p = lattice.N, lattice.p
    n = (N * d if spatial else 0) + d * p + 1
    r, c = _data_positions(N, p, d, lattice.obs_index, spatial)
    mirror = r != c
    rows = [r, c[mirror]]
    cols = [c, r[mirror]]
    if spatial:
        pattern = lattice.q_parts()[0].tocoo()
        kb, mb = np.divmod(np.arange(d * d), d)
        rows.insert(0, (kb[:, None] * N + pattern.row[None, :]).ravel())
        cols.insert(0, (mb[:, None] * N + pattern.col[None, :]).ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    # unique column-major keys are exactly the CSC storage order
    keys, inverse = np.unique(cols * n + rows, return_inverse=True)
    uc, ur = np.divmod(keys, n)
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(uc, minlength=n), out=indptr[1:])
    layout = _FisherLayout(n, indptr, ur.astype(np.int32), inverse.ravel(), mirror)
    cache[key] = layout
    return layout


def fisher_information(state: ModelState, lattice: LatticeModel, Y, hp: HyperParams,
                       Q=None) -> sp.csc_matrix:
    """Expected Fisher information of ``(X, beta, alpha)``.

    Data part: the site-wise ``d x d`` blocks
    ``H_s = alpha^2 sum_l psi'(alpha z_l) dz_l/deta dz_l/deta^T`` mapped
    through ``[A, A B]``, cross terms ``alpha sum_l z_l psi'(alpha z_l)
    dz_l/deta`` with ``alpha``, and the alpha curvature. Prior part:
    ``blockdiag(rho^-1 kron Q, q_beta I)`` plus ``(a_alpha - 1)/alpha^2``.

    ``Q`` may be passed when ``Q(kappa)`` is already assembled by
    :func:`assemble_Q`.
    """
    Y, d = _y_dims(Y, lattice)
    alpha = state.alpha
    spatial = state.spatial
    n_o = lattice.n_obs
    p = lattice.p
    n_b = d * p
    layout = _fisher_layout(lattice, d, spatial)

    z, J = _site_terms(state, lattice, Y, d)
    tri = trigamma(alpha * z)                                  # (N_o, D)
    H = alpha ** 2 * np.einsum("sl,skl,sml->skm", tri, J, J)   # (N_o, d, d)
    w = alpha * np.einsum("sl,sl,skl->sk", z, tri, J)          # (N_o, d)
    i_aa = (np.sum(z * z * tri) - n_o * trigamma(alpha)
            + (hp.a_alpha - 1.0) / alpha ** 2)
    i_aa = max(float(i_aa), ALPHA_INFO_FLOOR)

    Bo = lattice.B[lattice.obs_index]                          # (N_o, p)
    Hbb = np.einsum("skm,sj,si->kjmi", H, Bo, Bo).reshape(n_b, n_b)
    Hbb[np.diag_indices(n_b)] += hp.q_beta
    vals = [Hbb[np.triu_indices(n_b)], (Bo.T @ w).T.ravel(), [i_aa]]
    if spatial:
        kk, mm = np.triu_indices(d)
        vals.append(H[:, kk, mm].ravel())
        k_idx, m_idx, j_idx = (a.ravel() for a in np.meshgrid(
            np.arange(d), np.arange(d), np.arange(p), indexing="ij"))
        vals.append((H[:, k_idx, m_idx] * Bo[:, j_idx]).ravel())
        vals.append(w.ravel())
    v = np.concatenate(vals)
    v = [v, v[layout.mirror]]
    if spatial:
        if Q is None or Q.nnz != lattice.q_parts()[0].nnz:
            Q = assemble_Q(lattice, state.kappa)
        rho_inv = np.linalg.inv(np.atleast_2d(state.rho))
        rho_inv = 0.5 * (rho_inv + rho_inv.T)
        v.insert(0, np.outer(rho_inv.ravel(), Q.data).ravel())
    data = np.bincount(layout.inverse, weights=np.concatenate(v), minlength=layout.nnz)
    return sp.csc_matrix((data, layout.indices, layout.indptr), shape=(layout.n, layout.n))
