"""Posterior products from a trace: compositions at every node and joint
elliptical confidence / prediction regions mapped onto the simplex.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .composition import alr, inv_alr
from .sampler import McmcTrace

logger = logging.getLogger(__name__)

__all__ = [
    "RegionSummary",
    "TernaryBounds",
    "confidence_region",
    "posterior_composition",
    "posterior_mean_compositions",
    "prediction_region",
    "region_contains",
    "ternary_bounds",
]

MIN_SAMPLES = 100
BOUNDARY_POINTS = 4096


def posterior_composition(trace: McmcTrace, node: int) -> np.ndarray:
    """Posterior mean of ``z = inv_alr(eta)`` at a node (not ``inv_alr`` of mean eta)."""
    if trace.n_samples == 0:
        raise ValueError("trace holds no samples")
    return inv_alr(trace.eta_samples(node)).mean(axis=0)


def posterior_mean_compositions(trace: McmcTrace, nodes=None,
                                summary: str = "mean_z") -> np.ndarray:
    """Point summaries at many nodes, shape ``(n_nodes, D)``.

    ``summary="mean_z"`` averages compositions over samples;
    ``summary="inv_alr_mean_eta"`` maps the posterior mean of eta instead.
    """
    if trace.n_samples == 0:
        raise ValueError("trace holds no samples")
    if summary not in ("mean_z", "inv_alr_mean_eta"):
        raise ValueError(f"unknown summary {summary!r}")
    total = None
    for eta in trace.iter_eta_all():
        part = (inv_alr(eta) if summary == "mean_z" else eta).sum(axis=0)
        total = part if total is None else total + part
    out = total / trace.n_samples
    if summary == "inv_alr_mean_eta":
        out = inv_alr(out)
    return out if nodes is None else out[np.asarray(nodes)]


@dataclass
class RegionSummary:
    """Ellipse ``(eta - mu)^T sigma^-1 (eta - mu) <= c_quantile`` in alr space."""

    mu: np.ndarray
    sigma: np.ndarray
    c_quantile: float
    kind: str = "confidence"
    level: float = 0.95
    node: Optional[int] = None

    def mahalanobis_sq(self, eta) -> np.ndarray:
        diff = np.atleast_2d(eta) - self.mu
        return np.einsum("ij,ij->i", diff @ np.linalg.inv(self.sigma), diff)

    def to_dict(self) -> dict:
        return dict(mu=self.mu.tolist(), sigma=self.sigma.tolist(), c=self.c_quantile,
                    kind=self.kind, level=self.level)


def region_contains(region: RegionSummary, composition) -> np.ndarray:
    """Whether compositions fall inside the region (via their alr image)."""
    return region.mahalanobis_sq(alr(composition)) <= region.c_quantile


def _nearest_rank(values: np.ndarray, level: float) -> float:
    s = np.sort(values)
    rank = max(1, math.ceil(level * len(s)))
    return float(s[min(rank, len(s)) - 1])


def region_from_samples(eta: np.ndarray, level: float = 0.95, kind: str = "confidence",
                        node: Optional[int] = None) -> RegionSummary:
    """Sample-mean/covariance ellipse whose size is the empirical ``level``
    quantile of the samples' own squared Mahalanobis distances.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None]
    if len(eta) < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} samples, got {len(eta)}")
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    d = eta.shape[1]
    mu = eta.mean(axis=0)
    sigma = np.atleast_2d(np.cov(eta, rowvar=False))
    try:
        np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * max(np.trace(sigma), 1e-300) / d
        logger.warning("degenerate sample covariance; adding jitter %g", jitter)
        sigma = sigma + jitter * np.eye(d)
    region = RegionSummary(mu, sigma, 0.0, kind, level, node)
    region.c_quantile = _nearest_rank(region.mahalanobis_sq(eta), level)
    if region.c_quantile <= 0:
        region.c_quantile = np.finfo(float).tiny
    return region


def confidence_region(trace: McmcTrace, node: int, level: float = 0.95) -> RegionSummary:
    """Joint confidence region for the latent composition at ``node``."""
    return region_from_samples(trace.eta_samples(node), level, "confidence", node)


def simulate_predictive(eta: np.ndarray, alpha: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One Dirichlet draw ``y* ~ Dir(alpha_i inv_alr(eta_i))`` per sample."""
    z = inv_alr(eta)
    g = rng.gamma(np.asarray(alpha)[:, None] * z)
    g = np.maximum(g, np.finfo(float).tiny)
    return g / g.sum(axis=1, keepdims=True)


def prediction_region(trace: McmcTrace, node: int, level: float = 0.95,
                      rng: Optional[np.random.Generator] = None) -> RegionSummary:
    """Region for a new observation at ``node``: one simulated Dirichlet
    observation per retained sample, mapped to alr space.
    """
    rng = np.random.default_rng(trace.seed) if rng is None else rng
    ystar = simulate_predictive(trace.eta_samples(node), trace.alpha, rng)
    return region_from_samples(alr(ystar), level, "prediction", node)


@dataclass
class TernaryBounds:
    """Per-component joint extremes over the region boundary.

    ``lower[k]`` / ``upper[k]`` are the full compositions at which component
    ``k`` attains its minimum / maximum, so ``lower[k][k]`` is the bound and
    the other entries the accompanying parts.
    """

    lower: np.ndarray          # (D, D)
    upper: np.ndarray          # (D, D)
    center: np.ndarray         # (D,) inv_alr(mu)
    boundary: np.ndarray = field(repr=False, default=None)   # (n, D)

    @property
    def minimum(self) -> np.ndarray:
        return np.diag(self.lower).copy()

    @property
    def maximum(self) -> np.ndarray:
        return np.diag(self.upper).copy()

    def to_dict(self) -> dict:
        return dict(minimum=self.minimum.tolist(), maximum=self.maximum.tolist(),
                    at_minimum=self.lower.tolist(), at_maximum=self.upper.tolist(),
                    center=self.center.tolist())


def ellipse_boundary(region: RegionSummary, n_points: int = BOUNDARY_POINTS) -> np.ndarray:
    """Points on the 2-d region boundary in alr coordinates."""
    d = len(region.mu)
    if d != 2:
        raise ValueError("ellipse boundary is only defined for d = 2 (three parts)")
    t = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    circle = np.column_stack([np.cos(t), np.sin(t)])
    L = np.linalg.cholesky(region.sigma)
    return region.mu + math.sqrt(region.c_quantile) * circle @ L.T


def ternary_bounds(region: RegionSummary, n_points: int = BOUNDARY_POINTS) -> TernaryBounds:
    """Minimum and maximum of every part over the boundary mapped to the simplex.

    Each part is strictly monotone along some direction everywhere, so the
    extremes over the filled ellipse are attained on its boundary.
    """
    z = inv_alr(ellipse_boundary(region, n_points))
    lo = np.argmin(z, axis=0)
    hi = np.argmax(z, axis=0)
    return TernaryBounds(lower=z[lo], upper=z[hi], center=inv_alr(region.mu), boundary=z)
