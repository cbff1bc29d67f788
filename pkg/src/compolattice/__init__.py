"""Spatial Dirichlet regression on lattices.

Compositional observations are modelled as Dirichlet draws whose mean is the
inverse additive log-ratio of a regression term plus a latent multivariate
Gaussian Markov random field with Matérn-type (SPDE) precision. Inference is
by a block sampler: Fisher-preconditioned adaptive MALA for the field,
regression coefficients and Dirichlet scale, and a marginalized random walk
on the range parameter with a conjugate draw of the cross-covariance.
"""
__version__ = "0.1.0"

from .composition import AlrTransformer, acd, alr, inv_alr, repair_compositions
from .estimator import SpatialDirichletRegressor
from .inference import (
    RegionSummary,
    TernaryBounds,
    confidence_region,
    posterior_composition,
    posterior_mean_compositions,
    prediction_region,
    ternary_bounds,
)
from .io import emit, ingest
from .lattice import LatticeModel, assemble_Q, build_lattice, lattice_from_cells
from .likelihood import HyperParams, ModelState
from .sampler import McmcTrace, SamplerConfig, SamplerError, run_chain
from .validation import CvReport, cross_validate, make_synthetic_problem, simulate_dataset

__all__ = [
    "AlrTransformer",
    "CvReport",
    "HyperParams",
    "LatticeModel",
    "McmcTrace",
    "ModelState",
    "RegionSummary",
    "SamplerConfig",
    "SamplerError",
    "SpatialDirichletRegressor",
    "TernaryBounds",
    "acd",
    "alr",
    "assemble_Q",
    "build_lattice",
    "confidence_region",
    "cross_validate",
    "emit",
    "ingest",
    "inv_alr",
    "lattice_from_cells",
    "make_synthetic_problem",
    "posterior_composition",
    "posterior_mean_compositions",
    "prediction_region",
    "repair_compositions",
    "run_chain",
    "simulate_dataset",
    "ternary_bounds",
]
