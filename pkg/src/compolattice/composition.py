"""Simplex algebra: additive log-ratio transform, its derivatives, and the
Aitchison-type compositional distance.

Arrays carry compositions along the last axis: ``(..., D)`` for parts and
``(..., d)`` with ``d = D - 1`` for log-ratio coordinates.
"""
from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

logger = logging.getLogger(__name__)

__all__ = [
    "AlrTransformer",
    "acd",
    "alr",
    "closure",
    "d2_inv_alr",
    "d_inv_alr",
    "inv_alr",
    "repair_compositions",
]

REPAIR_FLOOR = 1e-6


def closure(parts) -> np.ndarray:
    parts = np.asarray(parts, dtype=float)
    return parts / parts.sum(axis=-1, keepdims=True)


def _check_interior(z, name="z"):
    z = np.asarray(z, dtype=float)
    if z.shape[-1] < 2:
        raise ValueError(f"{name} needs at least two parts")
    if not np.all(np.isfinite(z)) or np.any(z <= 0):
        raise ValueError(f"{name} must lie strictly inside the simplex")
    return z


def alr(z) -> np.ndarray:
    """``eta_k = log(z_k / z_D)`` for ``k = 1..D-1``."""
    z = _check_interior(z)
    logz = np.log(z)
    return logz[..., :-1] - logz[..., -1:]


def inv_alr(eta) -> np.ndarray:
    """Inverse of :func:`alr`; overflow-safe for large coordinates."""
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise ValueError("eta must be finite")
    # shift by max(0, max_k eta_k): the implicit last coordinate is 0
    shift = np.maximum(eta.max(axis=-1, keepdims=True), 0.0)
    e = np.exp(eta - shift)
    last = np.exp(-shift)
    denom = e.sum(axis=-1, keepdims=True) + last
    return np.concatenate([e, last], axis=-1) / denom


def d_inv_alr(z) -> np.ndarray:
    """Jacobian of :func:`inv_alr` in terms of ``z``.

    Returns an array of shape ``(..., d, D)`` whose ``[i, k]`` entry is
    ``dz_k / deta_i = z_k (delta_ik - z_i)``.
    """
    z = np.asarray(z, dtype=float)
    D = z.shape[-1]
    d = D - 1
    zi = z[..., :d, None]
    eye = np.eye(d, D)
    return z[..., None, :] * (eye - zi)


def d2_inv_alr(z) -> np.ndarray:
    """Second derivatives ``d^2 z_k / deta_i deta_j``, shape ``(..., d, d, D)``.

    Uses ``z_k (delta_kj - z_j)(delta_ki - z_i) - z_k z_i (delta_ij - z_j)``,
    which covers every index case at once.
    """
    z = np.asarray(z, dtype=float)
    D = z.shape[-1]
    d = D - 1
    eye = np.eye(d, D)
    zi = z[..., :d]
    a = eye - zi[..., :, None]                      # (..., d, D): delta_ki - z_i
    zk = z[..., None, None, :]
    term1 = zk * a[..., None, :, :] * a[..., :, None, :]
    term2 = zk * (zi[..., :, None, None]
                  * (np.eye(d)[..., None] - zi[..., None, :, None]))
    return term1 - term2


def acd(u, v) -> np.ndarray:
    """Compositional distance ``[(a-b)^T J^{-1} (a-b)]^{1/2}`` with ``a, b``
    the alr coordinates of ``u, v`` and ``J = I + 1 1^T``.

    Works on stacks of compositions; returns a scalar for single pairs.
    """
    u = _check_interior(u, "u")
    v = _check_interior(v, "v")
    if u.shape[-1] != v.shape[-1]:
        raise ValueError("compositions have different numbers of parts")
    delta = alr(u) - alr(v)
    D = u.shape[-1]
    # J^{-1} = I - 1 1^T / D
    sq = np.sum(delta * delta, axis=-1) - np.sum(delta, axis=-1) ** 2 / D
    out = np.sqrt(np.maximum(sq, 0.0))
    return float(out) if out.ndim == 0 else out


def repair_compositions(y, floor: float = REPAIR_FLOOR, sum_tol: float = 1e-6):
    """Pull compositions with zero (or unit) parts into the open simplex.

    Rows must be non-negative and sum to one within ``sum_tol``. Parts below
    ``floor`` are set to ``floor`` and the remaining parts rescaled so the
    row sums to one. A repaired row has its smallest part exactly at
    ``floor``, so repairing twice changes nothing.

    Returns
    -------
    repaired : ndarray
    n_repaired : int
        Number of rows that were modified.
    """
    y = np.array(y, dtype=float, ndmin=2)
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise ValueError("compositions must be finite and non-negative")
    sums = y.sum(axis=1)
    bad = np.abs(sums - 1.0) > sum_tol
    if np.any(bad):
        raise ValueError(f"{bad.sum()} composition rows do not sum to 1 (tol {sum_tol})")
    low = y < floor
    rows = low.any(axis=1)
    if np.any(low.sum(axis=1) * floor >= 1.0):
        raise ValueError("too many zero parts to repair with this floor")
    if rows.any():
        sub, sub_low = y[rows], low[rows]
        keep = np.where(sub_low, 0.0, sub)
        scale = (1.0 - floor * sub_low.sum(axis=1)) / keep.sum(axis=1)
        y[rows] = np.where(sub_low, floor, keep * scale[:, None])
        logger.warning("repaired %d compositions with parts below %g", rows.sum(), floor)
    return y, int(rows.sum())


class AlrTransformer(TransformerMixin, BaseEstimator):
    """Stateless alr transform for use in pipelines.

    ``transform`` maps ``(n, D)`` compositions to ``(n, D-1)`` coordinates,
    ``inverse_transform`` goes back. Zero parts are repaired when
    ``repair=True``.
    """

    def __init__(self, repair=True):
        self.repair = repair

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        X = check_array(X)
        if self.repair:
            X, _ = repair_compositions(closure(X))
        return alr(X)

    def inverse_transform(self, X):
        return inv_alr(check_array(X))

    def get_feature_names_out(self, input_features=None):
        n = getattr(self, "n_features_in_", None)
        if n is None:
            raise ValueError("fit the transformer first")
        return np.asarray([f"alr{k}" for k in range(n - 1)], dtype=object)
