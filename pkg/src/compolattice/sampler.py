"""Two-block MCMC: Fisher-preconditioned adaptive MALA over (X, beta, alpha),
then a log-scale random walk on kappa with rho integrated out and redrawn
from its inverse-Wishart full conditional.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg

from .composition import alr
from .lattice import (
    LatticeModel,
    NotPositiveDefiniteError,
    OrderedFactorizer,
    PrecisionFactor,
    assemble_Q,
    log_det_Q,
)
from .likelihood import (
    HyperParams,
    ModelState,
    fisher_information,
    grad_log_posterior,
    log_posterior,
)

logger = logging.getLogger(__name__)

__all__ = [
    "McmcTrace",
    "SamplerConfig",
    "SamplerError",
    "adapt_step",
    "initial_state",
    "kappa_rho_step",
    "log_kappa_posterior",
    "mala_step",
    "run_chain",
    "sample_inverse_wishart",
]

STEP_FLOOR = 1e-8
# kappa^2 c must stay above this fraction of the largest eigenvalue of G,
# otherwise Q is numerically singular (condition number above 1e12)
KAPPA_CONDITION_RATIO = 1e-6
VARIANTS = ("full", "regression_only")


class SamplerError(RuntimeError):
    """Unrecoverable numerical failure inside :func:`run_chain`."""

    def __init__(self, message, iteration, state_summary):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
        self.state_summary = state_summary


@dataclass
class SamplerConfig:
    n_iter: int = 20_000
    burn_in: int = 5_000
    thin: int = 1
    eps0: float = 0.1
    sigma_kappa0: float = 0.3
    target_mala: float = 0.57
    target_rw: float = 0.4
    seed: int = 0
    model_variant: str = "full"

    def __post_init__(self):
        if self.model_variant == "rm":
            self.model_variant = "regression_only"
        if self.model_variant not in VARIANTS:
            raise ValueError(f"model_variant must be one of {VARIANTS}")
        if not (0 <= self.burn_in < self.n_iter):
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        for name in ("target_mala", "target_rw"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not (self.eps0 > 0 and self.sigma_kappa0 > 0):
            raise ValueError("initial step sizes must be positive")

    @property
    def spatial(self) -> bool:
        return self.model_variant == "full"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# MALA block
# ---------------------------------------------------------------------------

@dataclass
class _Point:
    """A state with everything MALA needs cached."""

    state: ModelState
    theta: np.ndarray
    logp: float
    grad: np.ndarray
    info: object
    factor: PrecisionFactor
    drift: np.ndarray          # info^{-1} grad


def _fisher_factorizer(lattice: LatticeModel, state: ModelState) -> OrderedFactorizer:
    key = ("fisher_factorizer", len(state.beta), state.spatial)
    if key not in lattice.cache:
        lattice.cache[key] = OrderedFactorizer()
    return lattice.cache[key]


def _evaluate(state, lattice, Y, hp, Q=None) -> _Point:
    logp = log_posterior(state, lattice, Y, hp, Q=Q)
    if not np.isfinite(logp):
        raise FloatingPointError("non-finite log posterior")
    grad = grad_log_posterior(state, lattice, Y, hp, Q=Q)
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    info = fisher_information(state, lattice, Y, hp, Q=Q)
    factor = _fisher_factorizer(lattice, state)(info)
    return _Point(state, state.theta(), logp, grad, info, factor, factor.solve(grad))


def log_proposal_density(to_theta, origin: _Point, eps: float) -> float:
    """``log N(to | theta + eps^2/2 I^-1 grad, eps^2 I^-1)`` at ``origin``."""
    n = len(origin.theta)
    r = to_theta - origin.theta - 0.5 * eps * eps * origin.drift
    quad = float(r @ (origin.info @ r))
    return (-0.5 * quad / (eps * eps) + 0.5 * origin.factor.log_det
            - n * math.log(eps) - 0.5 * n * math.log(2 * math.pi))


class MalaResult(NamedTuple):
    state: ModelState
    accepted: bool
    log_acc: float
    acc_prob: float
    point: Optional[_Point]


def mala_step(state: ModelState, lattice: LatticeModel, Y, hp: HyperParams, eps: float,
              rng: np.random.Generator, *, Q=None,
              current: Optional[_Point] = None) -> MalaResult:
    """One Metropolis-adjusted Langevin update of ``(X, beta, alpha)``.

    Proposal ``N(theta + eps^2/2 I^-1 grad, eps^2 I^-1)`` with ``I`` the
    expected Fisher information; the reverse density uses ``I`` and the
    gradient re-evaluated at the proposal. Proposals with ``alpha <= 0`` or
    a non-SPD information matrix are rejected.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if current is None:
        current = _evaluate(state, lattice, Y, hp, Q=Q)
    z = rng.standard_normal(len(current.theta))
    proposal = (current.theta + 0.5 * eps * eps * current.drift
                + eps * current.factor.inv_sqrt_t_matvec(z))
    reject = MalaResult(state, False, -np.inf, 0.0, current)
    if not proposal[-1] > 0:
        return reject
    new_state = state.with_theta(proposal)
    try:
        cand = _evaluate(new_state, lattice, Y, hp, Q=Q)
    except (NotPositiveDefiniteError, FloatingPointError, ValueError) as exc:
        logger.debug("MALA proposal rejected: %s", exc)
        return reject
    log_acc = (cand.logp - current.logp
               + log_proposal_density(current.theta, cand, eps)
               - log_proposal_density(proposal, current, eps))
    if not np.isfinite(log_acc):
        return reject
    acc_prob = math.exp(min(0.0, log_acc))
    if rng.uniform() < acc_prob:
        return MalaResult(new_state, True, log_acc, acc_prob, cand)
    return MalaResult(state, False, log_acc, acc_prob, current)


def adapt_step(eps: float, acc_prob: float, iteration: int, target: float) -> float:
    """Robbins-Monro update ``eps + iteration^-1/2 (acc_prob - target)``."""
    if iteration < 1:
        raise ValueError("iteration must be >= 1")
    return max(eps + iteration ** -0.5 * (acc_prob - target), STEP_FLOOR)


# ---------------------------------------------------------------------------
# kappa / rho block
# ---------------------------------------------------------------------------

def sample_inverse_wishart(scale, df: float, rng: np.random.Generator) -> np.ndarray:
    """Draw ``rho ~ IW(scale, df)`` (density ∝ |rho|^{-(df+d+1)/2} exp(-tr(rho^-1 scale)/2)).

    Bartlett decomposition: with ``scale = M M^T`` and ``W = A A^T ~ W(I, df)``,
    ``rho = M W^{-1} M^T``.
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=float))
    d = scale.shape[0]
    if not df > d - 1:
        raise ValueError("degrees of freedom must exceed d - 1")
    M = np.linalg.cholesky(scale)
    A = np.zeros((d, d))
    A[np.diag_indices(d)] = np.sqrt(rng.chisquare(df - np.arange(d)))
    il = np.tril_indices(d, -1)
    A[il] = rng.standard_normal(len(il[0]))
    T = scipy.linalg.solve_triangular(A, M.T, lower=True)
    rho = T.T @ T
    return 0.5 * (rho + rho.T)


def _field_matrix(X, N, d):
    return X.reshape(d, N).T


def log_kappa_posterior(kappa: float, x: np.ndarray, lattice: LatticeModel, hp: HyperParams,
                        Q=None, logdet_Q: Optional[float] = None) -> float:
    """Log density of ``kappa | X`` with ``rho`` integrated out (up to a constant).

    ``(d/2) log|Q| - ((N + b_rho)/2) log|a_rho I + x^T Q x| + (d b_rho/2) log a_rho
    + (a_kappa - 1) log kappa - b_kappa kappa``; ``x`` is the ``N x d`` field matrix.
    """
    if not kappa > 0:
        return -np.inf
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    N, d = x.shape
    if Q is None:
        Q = assemble_Q(lattice, kappa)
    if logdet_Q is None:
        logdet_Q = log_det_Q(lattice, kappa)
    S = hp.a_rho * np.eye(d) + x.T @ (Q @ x)
    sign, logdet_S = np.linalg.slogdet(S)
    if sign <= 0:
        return -np.inf
    return (0.5 * d * logdet_Q - 0.5 * (N + hp.b_rho) * logdet_S
            + 0.5 * d * hp.b_rho * math.log(hp.a_rho)
            + (hp.a_kappa - 1.0) * math.log(kappa) - hp.b_kappa * kappa)


class KappaRhoResult(NamedTuple):
    kappa: float
    rho: np.ndarray
    accepted: bool
    acc_prob: float
    Q: object
    logdet_Q: float


def kappa_rho_step(state: ModelState, lattice: LatticeModel, hp: HyperParams,
                   sigma_kappa: float, rng: np.random.Generator, Q=None,
                   logdet_Q: Optional[float] = None) -> KappaRhoResult:
    """Joint update of ``(kappa, rho)`` given ``X``.

    ``log kappa* = log kappa + N(0, sigma_kappa^2)`` accepted with
    ``min(1, p(kappa*|X)/p(kappa|X) * kappa*/kappa)``; afterwards
    ``rho ~ IW(a_rho I + x^T Q x, N + b_rho)`` at the retained kappa.
    Proposals below :func:`kappa_floor` are rejected.
    """
    if not state.spatial:
        raise ValueError("kappa/rho update needs the spatial model")
    N = lattice.N
    d = len(state.X) // N
    x = _field_matrix(state.X, N, d)
    kappa = state.kappa
    if Q is None:
        Q = assemble_Q(lattice, kappa)
    if logdet_Q is None:
        logdet_Q = log_det_Q(lattice, kappa)
    lp = log_kappa_posterior(kappa, x, lattice, hp, Q=Q, logdet_Q=logdet_Q)
    kappa_new = kappa * math.exp(sigma_kappa * rng.standard_normal())
    u = rng.uniform()
    accepted, acc_prob = False, 0.0
    try:
        if kappa_new < kappa_floor(lattice):
            raise ValueError(f"kappa {kappa_new:.3g} below the numerical floor")
        Q_new = assemble_Q(lattice, kappa_new)
        logdet_new = log_det_Q(lattice, kappa_new)
        lp_new = log_kappa_posterior(kappa_new, x, lattice, hp, Q=Q_new, logdet_Q=logdet_new)
        log_acc = lp_new - lp + math.log(kappa_new) - math.log(kappa)
        if np.isfinite(log_acc):
            acc_prob = math.exp(min(0.0, log_acc))
            accepted = u < acc_prob
    except (NotPositiveDefiniteError, ValueError, OverflowError) as exc:
        logger.debug("kappa proposal rejected: %s", exc)
    if accepted:
        kappa, Q, logdet_Q = kappa_new, Q_new, logdet_new
    S = hp.a_rho * np.eye(d) + x.T @ (Q @ x)
    rho = sample_inverse_wishart(0.5 * (S + S.T), N + hp.b_rho, rng)
    return KappaRhoResult(kappa, rho, accepted, acc_prob, Q, logdet_Q)


# ---------------------------------------------------------------------------
# chain driver
# ---------------------------------------------------------------------------

def kappa_floor(lattice: LatticeModel) -> float:
    """Smallest kappa for which ``Q(kappa)`` stays numerically non-singular.

    Uses the Gershgorin bound ``2 max(diag G)`` on the spectrum of ``G``.
    """
    lam_max = 2.0 * float(lattice.G.diagonal().max(initial=0.0))
    c_min = float(lattice.C.diagonal().min())
    return math.sqrt(KAPPA_CONDITION_RATIO * lam_max / c_min)


def initial_state(lattice: LatticeModel, Y, hp: HyperParams, variant: str = "full") -> ModelState:
    """Data-informed starting point.

    beta from least squares of alr(Y) on the observed covariates, X = 0,
    alpha = a_alpha/b_alpha clipped to [1, 50], kappa from a range of a
    fifth of the domain diameter, rho from the residual covariance.
    """
    Y = np.asarray(Y, dtype=float)
    d = Y.shape[1] - 1
    p = lattice.p
    Bo = lattice.B[lattice.obs_index]
    if lattice.n_obs:
        eta = alr(Y)
        coef, *_ = np.linalg.lstsq(Bo, eta, rcond=None)
        resid = eta - Bo @ coef
    else:
        coef = np.zeros((p, d))
        resid = np.zeros((0, d))
    beta = coef.T.ravel()
    alpha = float(np.clip(hp.a_alpha / hp.b_alpha, 1.0, 50.0))
    if variant in ("regression_only", "rm"):
        return ModelState(beta=beta, alpha=alpha)
    diameter = lattice.diameter()
    kappa = math.sqrt(8.0) / (diameter / 5.0) if diameter > 0 else 1.0
    if len(resid) > d:
        rho = np.atleast_2d(np.cov(resid, rowvar=False))
    else:
        rho = np.eye(d)
    rho = 0.5 * (rho + rho.T) + 1e-6 * np.eye(d)
    try:
        np.linalg.cholesky(rho)
    except np.linalg.LinAlgError:
        rho = np.eye(d)
    return ModelState(beta=beta, alpha=alpha, X=np.zeros(lattice.N * d), kappa=kappa, rho=rho)


@dataclass
class McmcTrace:
    """Post-burn-in samples plus per-iteration diagnostics.

    ``X`` has shape ``(S, N*d)`` (field-major), ``beta`` ``(S, d*p)``,
    ``rho`` ``(S, d, d)``; spatial entries are ``None`` for the
    regression-only model.
    """

    beta: np.ndarray
    alpha: np.ndarray
    X: Optional[np.ndarray]
    kappa: Optional[np.ndarray]
    rho: Optional[np.ndarray]
    mala_accepted: np.ndarray
    mala_acc_prob: np.ndarray
    eps_history: np.ndarray
    kappa_accepted: Optional[np.ndarray]
    kappa_acc_prob: Optional[np.ndarray]
    sigma_kappa_history: Optional[np.ndarray]
    B: np.ndarray
    obs_index: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    cell_ids: np.ndarray
    d: int
    n_iter: int
    burn_in: int
    thin: int
    seed: int
    model_variant: str
    elapsed_seconds: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.alpha)

    @property
    def N(self) -> int:
        return self.B.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def iterations_per_second(self) -> float:
        return self.n_iter / self.elapsed_seconds if self.elapsed_seconds > 0 else float("nan")

    def acceptance_rate(self, block: str = "mala", post_burn_in: bool = True) -> float:
        flags = self.mala_accepted if block == "mala" else self.kappa_accepted
        if flags is None:
            return float("nan")
        if post_burn_in:
            flags = flags[self.burn_in:]
        return float(np.mean(flags))

    def eta_samples(self, node: int) -> np.ndarray:
        """Samples of the latent log-ratio vector at one node, ``(S, d)``."""
        if not 0 <= node < self.N:
            raise IndexError(f"node {node} outside [0, {self.N})")
        beta = self.beta.reshape(-1, self.d, self.p)
        eta = beta @ self.B[node]
        if self.X is not None:
            eta = eta + self.X[:, node::self.N][:, :self.d]
        return eta

    def iter_eta_all(self, chunk: int = 256):
        """Yield ``(S_chunk, N, d)`` blocks of the latent field at every node."""
        beta = self.beta.reshape(-1, self.d, self.p)
        for start in range(0, self.n_samples, chunk):
            sl = slice(start, start + chunk)
            eta = np.einsum("np,skp->snk", self.B, beta[sl])
            if self.X is not None:
                eta = eta + self.X[sl].reshape(-1, self.d, self.N).transpose(0, 2, 1)
            yield eta

    def scalar_names(self) -> list:
        names = ["alpha"]
        if self.kappa is not None:
            names.append("kappa")
            names += [f"rho_{i + 1}{j + 1}" for i in range(self.d) for j in range(i, self.d)]
        names += [f"beta_{k + 1}{j}" for k in range(self.d) for j in range(self.p)]
        return names

    def scalar_table(self) -> np.ndarray:
        cols = [self.alpha[:, None]]
        if self.kappa is not None:
            cols.append(self.kappa[:, None])
            iu = np.triu_indices(self.d)
            cols.append(self.rho[:, iu[0], iu[1]])
        cols.append(self.beta)
        return np.hstack(cols)

    def parameter_summary(self, level: float = 0.95) -> list:
        """Posterior mean and equal-tailed interval per scalar parameter."""
        table = self.scalar_table()
        lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
        return [
            dict(parameter=name, estimate=float(np.mean(col)),
                 ci_low=float(np.quantile(col, lo)), ci_high=float(np.quantile(col, hi)))
            for name, col in zip(self.scalar_names(), table.T)
        ]

    # -- serialization ------------------------------------------------------

    _ARRAYS = ("beta", "alpha", "X", "kappa", "rho", "mala_accepted", "mala_acc_prob",
               "eps_history", "kappa_accepted", "kappa_acc_prob", "sigma_kappa_history",
               "B", "obs_index", "rows", "cols", "cell_ids")

    def header(self) -> dict:
        return dict(
            format="compolattice-trace/1", d=self.d, N=self.N, p=self.p,
            n_samples=self.n_samples, n_iter=self.n_iter, burn_in=self.burn_in,
            thin=self.thin, seed=self.seed, model_variant=self.model_variant,
            elapsed_seconds=self.elapsed_seconds, meta=self.meta,
        )

    def save(self, path) -> None:
        """Write a column-per-array ``.npz`` with an embedded JSON header."""
        arrays = {k: getattr(self, k) for k in self._ARRAYS if getattr(self, k) is not None}
        header = json.dumps(self.header(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            np.savez(fh, __header__=np.frombuffer(header, dtype=np.uint8), **arrays)

    @classmethod
    def load(cls, path) -> "McmcTrace":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(bytes(data["__header__"]).decode())
            arrays = {k: (data[k] if k in data.files else None) for k in cls._ARRAYS}
        return cls(
            **arrays, d=header["d"], n_iter=header["n_iter"], burn_in=header["burn_in"],
            thin=header["thin"], seed=header["seed"], model_variant=header["model_variant"],
            elapsed_seconds=header["elapsed_seconds"], meta=header.get("meta", {}),
        )


def _state_summary(state: ModelState) -> dict:
    out = dict(alpha=float(state.alpha), beta=np.asarray(state.beta).tolist())
    if state.spatial:
        out.update(kappa=float(state.kappa), rho=np.asarray(state.rho).tolist(),
                   X_min=float(np.min(state.X)), X_max=float(np.max(state.X)),
                   X_finite=bool(np.all(np.isfinite(state.X))))
    return out


def run_chain(lattice: LatticeModel, Y, hp: HyperParams, config: SamplerConfig,
              init: Optional[ModelState] = None,
              callback: Optional[Callable[[int, ModelState], None]] = None) -> McmcTrace:
    """Run the block sampler and return the thinned post-burn-in trace.

    Step sizes adapt during burn-in only and are frozen afterwards.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] != lattice.n_obs:
        raise ValueError(f"Y must have one row per observed node ({lattice.n_obs})")
    d = Y.shape[1] - 1
    if d < 1:
        raise ValueError("compositions need at least two parts")
    hp.validate(d)
    spatial = config.spatial
    rng = np.random.default_rng(config.seed)
    state = (init.copy() if init is not None
             else initial_state(lattice, Y, hp, config.model_variant))
    if state.spatial != spatial:
        raise ValueError("initial state does not match the model variant")
    state.check(lattice, d)

    n_iter, burn_in, thin = config.n_iter, config.burn_in, config.thin
    n_keep = (n_iter - burn_in) // thin
    N, p = lattice.N, lattice.p
    keep_beta = np.empty((n_keep, d * p))
    keep_alpha = np.empty(n_keep)
    keep_X = np.empty((n_keep, N * d)) if spatial else None
    keep_kappa = np.empty(n_keep) if spatial else None
    keep_rho = np.empty((n_keep, d, d)) if spatial else None
    mala_acc = np.zeros(n_iter, dtype=bool)
    mala_prob = np.zeros(n_iter)
    eps_hist = np.zeros(n_iter)
    k_acc = np.zeros(n_iter, dtype=bool) if spatial else None
    k_prob = np.zeros(n_iter) if spatial else None
    sig_hist = np.zeros(n_iter) if spatial else None

    eps, sigma_kappa = config.eps0, config.sigma_kappa0
    Q = assemble_Q(lattice, state.kappa) if spatial else None
    logdet_Q = None
    current = None
    report_every = max(1, n_iter // 10)
    start = time.perf_counter()
    j = 0
    for it in range(1, n_iter + 1):
        if current is None:
            try:
                current = _evaluate(state, lattice, Y, hp, Q=Q)
            except (NotPositiveDefiniteError, FloatingPointError, ValueError) as exc:
                raise SamplerError(f"cannot evaluate current state: {exc}", it,
                                   _state_summary(state)) from exc
        res = mala_step(state, lattice, Y, hp, eps, rng, Q=Q,
                        current=current)
        state, current = res.state, res.point
        mala_acc[it - 1] = res.accepted
        mala_prob[it - 1] = res.acc_prob
        eps_hist[it - 1] = eps
        if it <= burn_in:
            eps = adapt_step(eps, res.acc_prob, it + 1, config.target_mala)

        if spatial:
            kr = kappa_rho_step(state, lattice, hp, sigma_kappa, rng, Q=Q, logdet_Q=logdet_Q)
            state = dataclasses.replace(state, kappa=kr.kappa, rho=kr.rho)
            Q, logdet_Q = kr.Q, kr.logdet_Q
            current = None
            k_acc[it - 1] = kr.accepted
            k_prob[it - 1] = kr.acc_prob
            sig_hist[it - 1] = sigma_kappa
            if it <= burn_in:
                sigma_kappa = adapt_step(sigma_kappa, kr.acc_prob, it + 1, config.target_rw)

        if it > burn_in and (it - burn_in) % thin == 0:
            keep_beta[j] = state.beta
            keep_alpha[j] = state.alpha
            if spatial:
                keep_X[j] = state.X
                keep_kappa[j] = state.kappa
                keep_rho[j] = state.rho
            j += 1
        if callback is not None:
            callback(it, state)
        if it % report_every == 0:
            logger.info("iteration %d/%d  eps=%.4g  mala_acc=%.3f%s", it, n_iter, eps,
                        mala_acc[:it].mean(),
                        f"  kappa={state.kappa:.4g}" if spatial else "")
    elapsed = time.perf_counter() - start

    return McmcTrace(
        beta=keep_beta, alpha=keep_alpha, X=keep_X, kappa=keep_kappa, rho=keep_rho,
        mala_accepted=mala_acc, mala_acc_prob=mala_prob, eps_history=eps_hist,
        kappa_accepted=k_acc, kappa_acc_prob=k_prob, sigma_kappa_history=sig_hist,
        B=lattice.B.copy(), obs_index=lattice.obs_index.copy(), rows=lattice.rows.copy(),
        cols=lattice.cols.copy(), cell_ids=np.asarray(lattice.cell_ids).copy(), d=d,
        n_iter=n_iter, burn_in=burn_in, thin=thin, seed=config.seed,
        model_variant=config.model_variant, elapsed_seconds=elapsed,
        meta=dict(hyperparameters=hp.to_dict(), config=config.to_dict(),
                  final_eps=eps, final_sigma_kappa=sigma_kappa if spatial else None),
    )
