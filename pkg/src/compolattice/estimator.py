"""scikit-learn style front end to the spatial Dirichlet model."""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .composition import acd, repair_compositions
from .inference import (
    confidence_region,
    posterior_mean_compositions,
    prediction_region,
    ternary_bounds,
)
from .lattice import lattice_from_cells
from .likelihood import HyperParams
from .sampler import SamplerConfig, run_chain

__all__ = ["SpatialDirichletRegressor"]


class SpatialDirichletRegressor(RegressorMixin, BaseEstimator):
    """Dirichlet regression with a latent multivariate Matérn field on a lattice.

    The model is transductive: ``fit`` receives every lattice cell, with
    ``y`` rows set to NaN where nothing was observed, and ``predict`` maps
    cells of that lattice to posterior-mean compositions.

    Parameters
    ----------
    n_iter, burn_in, thin : int
        Chain length, adaptation/burn-in period and thinning.
    model_variant : {"full", "regression_only"}
        ``"rm"`` is accepted as an alias of ``"regression_only"``.
    random_state : int
        Master seed of the chain.
    a_alpha, b_alpha, a_kappa, b_kappa, a_rho, b_rho, q_beta : float
        Prior hyperparameters (see :class:`~compolattice.likelihood.HyperParams`).
    unit_spacing : float
        Cell size.
    summary : {"mean_z", "inv_alr_mean_eta"}
        Point prediction: posterior mean of the composition, or the
        composition at the posterior mean log-ratio.

    Attributes
    ----------
    trace_ : McmcTrace
    lattice_ : LatticeModel
    n_features_in_ : int
        ``2 + n_covariates``: columns are ``row, col, b_1, ...``.

    Examples
    --------
    >>> from compolattice.validation import make_synthetic_problem
    >>> ds = make_synthetic_problem(6, 6, 20, seed=1)
    >>> X, y = ds.as_cells()
    >>> est = SpatialDirichletRegressor(n_iter=200, burn_in=100).fit(X, y)
    >>> est.predict(X[:2]).shape
    (2, 3)
    """

    def __init__(self, n_iter=20_000, burn_in=5_000, thin=1, model_variant="full",
                 random_state=0, a_alpha=1.5, b_alpha=0.1, a_kappa=1.0,
                 b_kappa=math.log(100.0) / math.sqrt(8.0), a_rho=1.0, b_rho=10.0,
                 q_beta=1e-3, unit_spacing=1.0, summary="mean_z"):
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.thin = thin
        self.model_variant = model_variant
        self.random_state = random_state
        self.a_alpha = a_alpha
        self.b_alpha = b_alpha
        self.a_kappa = a_kappa
        self.b_kappa = b_kappa
        self.a_rho = a_rho
        self.b_rho = b_rho
        self.q_beta = q_beta
        self.unit_spacing = unit_spacing
        self.summary = summary

    def _hyperparams(self) -> HyperParams:
        return HyperParams(a_alpha=self.a_alpha, b_alpha=self.b_alpha, a_kappa=self.a_kappa,
                           b_kappa=self.b_kappa, a_rho=self.a_rho, b_rho=self.b_rho,
                           q_beta=self.q_beta)

    def _config(self) -> SamplerConfig:
        return SamplerConfig(n_iter=self.n_iter, burn_in=self.burn_in, thin=self.thin,
                             seed=self.random_state, model_variant=self.model_variant)

    @staticmethod
    def _cells(X):
        rc = X[:, :2]
        if not np.all(rc == np.round(rc)):
            raise ValueError("the first two columns of X must be integer row/col indices")
        return rc.astype(np.int64)

    def fit(self, X, y):
        """Run the sampler.

        Parameters
        ----------
        X : array-like, shape (N, 2 + n_covariates)
            ``row, col`` lattice position of every cell, then covariates
            (the intercept is added).
        y : array-like, shape (N, D)
            Compositions; rows that are entirely NaN are unobserved cells.
        """
        X = check_array(X, ensure_min_features=2)
        y = check_array(y, ensure_all_finite="allow-nan", ensure_min_features=2)
        if len(X) != len(y):
            raise ValueError("X and y must have the same number of rows")
        observed = ~np.isnan(y).any(axis=1)
        partial = np.isnan(y).any(axis=1) & ~np.isnan(y).all(axis=1)
        if np.any(partial):
            raise ValueError("y rows must be fully observed or entirely NaN")
        if not observed.any():
            raise ValueError("no observed cells")
        rc = self._cells(X)
        if len({tuple(r) for r in rc.tolist()}) != len(rc):
            raise ValueError("duplicate (row, col) cells in X")
        B = np.column_stack([np.ones(len(X)), X[:, 2:]])
        lattice = lattice_from_cells(rc[:, 0], rc[:, 1], self.unit_spacing,
                                     obs_index=np.flatnonzero(observed), B=B)
        Y, _ = repair_compositions(y[observed])
        self.trace_ = run_chain(lattice, Y, self._hyperparams(), self._config())
        self.lattice_ = lattice
        self.n_features_in_ = X.shape[1]
        self.n_parts_ = y.shape[1]
        self._lookup = lattice.node_lookup()
        return self

    def _nodes(self, X):
        check_is_fitted(self, "trace_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        rc = self._cells(X)
        try:
            return np.array([self._lookup[(r, c)] for r, c in rc.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"cell {exc.args[0]} is not part of the fitted lattice") from None

    def predict(self, X):
        """Posterior point compositions at the given cells, shape ``(n, D)``."""
        nodes = self._nodes(X)
        return posterior_mean_compositions(self.trace_, nodes=nodes, summary=self.summary)

    def score(self, X, y, sample_weight=None):
        """Negative mean compositional distance over the observed rows of ``y``."""
        y = check_array(y, ensure_all_finite="allow-nan")
        keep = ~np.isnan(y).any(axis=1)
        if not keep.any():
            raise ValueError("y has no observed rows")
        X = check_array(X)[keep]
        Y, _ = repair_compositions(y[keep])
        dist = np.atleast_1d(acd(self.predict(X), Y))
        return -float(np.average(dist, weights=sample_weight if sample_weight is None
                                 else np.asarray(sample_weight)[keep]))

    def predict_regions(self, X, level=0.95, kind="confidence", rng=None):
        """Per-cell regions; ``kind`` is ``"confidence"`` or ``"prediction"``."""
        nodes = self._nodes(X)
        if kind == "confidence":
            return [confidence_region(self.trace_, n, level) for n in nodes]
        if kind == "prediction":
            rng = np.random.default_rng(self.random_state) if rng is None else rng
            return [prediction_region(self.trace_, n, level, rng) for n in nodes]
        raise ValueError("kind must be 'confidence' or 'prediction'")

    def predict_bounds(self, X, level=0.95):
        """Ternary min/max bounds of the confidence region at each cell (D = 3)."""
        return [ternary_bounds(r) for r in self.predict_regions(X, level)]
