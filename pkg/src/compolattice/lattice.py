"""Lattice operators, the SPDE/Matérn precision Q(kappa) and sparse factorizations.

All multivariate vectors use field-major order: ``X = (X_1, ..., X_d)`` with
each ``X_k`` holding the ``N`` lattice nodes of field ``k``.
"""
from __future__ import annotations

import dataclasses
import weakref
from dataclasses import dataclass, field
from typing import Optional

import cvxopt
import numpy as np
import scipy.linalg
import scipy.sparse as sp
from cvxopt import cholmod
from scipy.sparse.linalg import splu

__all__ = [
    "LatticeModel",
    "CholmodFactor",
    "NotPositiveDefiniteError",
    "OrderedFactorizer",
    "PrecisionFactor",
    "assemble_Q",
    "assemble_joint_precision",
    "build_lattice",
    "factorize",
    "lattice_from_cells",
    "laplacian_spectrum",
    "log_det_Q",
    "sample_gmrf",
]

# below this size a dense Cholesky beats SuperLU's overhead
DENSE_THRESHOLD = 160
# largest lattice for which log|Q| comes from a one-off dense eigensolve
SPECTRUM_MAX_N = 4000


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a matrix handed to :func:`factorize` is not SPD."""


@dataclass(eq=False)
class LatticeModel:
    """Geometry and data design of a (possibly masked) rectangular lattice.

    Attributes
    ----------
    n_rows, n_cols : int
        Bounding-box shape of the grid.
    rows, cols : ndarray of int, shape (N,)
        Lattice coordinates of each active node, in node order.
    C : sparse (N, N)
        Diagonal cell-measure matrix.
    G : sparse (N, N)
        Graph Laplacian (stiffness matrix) over 4-neighbours, zero row sums.
    obs_index : ndarray of int, shape (N_o,)
        Node indices carrying observations; defines the selector ``A``.
    B : ndarray, shape (N, p)
        Covariates; column 0 is the intercept.
    cell_ids : ndarray, shape (N,)
        External identifiers of the nodes.
    covariate_names : list of str
        One name per column of ``B``.
    """

    n_rows: int
    n_cols: int
    rows: np.ndarray
    cols: np.ndarray
    C: sp.csc_matrix
    G: sp.csc_matrix
    unit_spacing: float = 1.0
    obs_index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    B: Optional[np.ndarray] = None
    cell_ids: Optional[np.ndarray] = None
    covariate_names: Optional[list] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.obs_index = np.asarray(self.obs_index, dtype=np.int64)
        if self.B is None:
            self.B = np.ones((self.N, 1))
        self.B = np.asarray(self.B, dtype=float)
        if self.B.ndim != 2 or self.B.shape[0] != self.N:
            raise ValueError(f"B must have shape (N={self.N}, p), got {self.B.shape}")
        if self.cell_ids is None:
            self.cell_ids = np.arange(self.N, dtype=np.int64)
        self.cell_ids = np.asarray(self.cell_ids)
        if len(self.cell_ids) != self.N:
            raise ValueError("need one cell_id per node")
        if self.covariate_names is None or len(self.covariate_names) != self.B.shape[1]:
            self.covariate_names = ["intercept"] + [f"b_{j}" for j in range(1, self.B.shape[1])]
        if len(np.unique(self.obs_index)) != len(self.obs_index):
            raise ValueError("obs_index entries must be distinct")
        if len(self.obs_index) and (self.obs_index.min() < 0 or self.obs_index.max() >= self.N):
            raise ValueError("obs_index entries must lie in [0, N)")
        self._q_parts = None
        self.cache = {}

    @property
    def N(self) -> int:
        return len(self.rows)

    @property
    def n_obs(self) -> int:
        return len(self.obs_index)

    @property
    def p(self) -> int:
        return self.B.shape[1]

    def with_data(self, obs_index=None, B=None, covariate_names=None) -> "LatticeModel":
        """Copy of the lattice with a new observation set and/or covariates."""
        new = dataclasses.replace(
            self,
            obs_index=self.obs_index if obs_index is None else obs_index,
            B=self.B if B is None else B,
            covariate_names=(covariate_names if covariate_names is not None
                             else self.covariate_names if B is None else None),
        )
        new._q_parts = self._q_parts
        if "spectrum" in self.cache:
            new.cache["spectrum"] = self.cache["spectrum"]
        return new

    def diameter(self) -> float:
        if self.N < 2:
            return 0.0
        dr = self.rows.max() - self.rows.min()
        dc = self.cols.max() - self.cols.min()
        return float(self.unit_spacing * np.hypot(dr, dc))

    def node_lookup(self) -> dict:
        """Map ``(row, col)`` to node index."""
        return {(int(r), int(c)): i for i, (r, c) in enumerate(zip(self.rows, self.cols))}

    def q_parts(self):
        """Aligned CSC pattern and data vectors of C, G and G C^-1 G."""
        if self._q_parts is None:
            C = self.C.tocsc()
            G = self.G.tocsc()
            cinv = sp.diags(1.0 / C.diagonal())
            GCG = (G @ cinv @ G).tocsc()
            # mirror the upper triangle so the result is exactly symmetric
            upper = sp.triu(GCG, format="csc")
            GCG = (upper + sp.triu(upper, k=1).T).tocsc()
            pattern = (abs(C) + abs(G) + abs(GCG)).tocsc()
            pattern.sort_indices()
            pattern.data[:] = 1.0
            coo = pattern.tocoo()
            # csc -> coo keeps the csc storage order, so data lines up
            r, c = coo.row, coo.col

            def aligned(M):
                return np.asarray(M.tocsr()[r, c]).ravel()

            self._q_parts = (pattern, aligned(C), aligned(G), aligned(GCG))
        return self._q_parts


def _laplacian(rows: np.ndarray, cols: np.ndarray) -> sp.csc_matrix:
    n = len(rows)
    lookup = {(int(r), int(c)): i for i, (r, c) in enumerate(zip(rows, cols))}
    if len(lookup) != n:
        raise ValueError("duplicate lattice coordinates")
    src, dst = [], []
    for i, (r, c) in enumerate(zip(rows, cols)):
        for dr, dc in ((0, 1), (1, 0)):
            j = lookup.get((int(r) + dr, int(c) + dc))
            if j is not None:
                src.append(i)
                dst.append(j)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    adj = sp.coo_matrix(
        (np.ones(2 * len(src)), (np.r_[src, dst], np.r_[dst, src])), shape=(n, n)
    ).tocsc()
    degree = np.asarray(adj.sum(axis=1)).ravel()
    return (sp.diags(degree) - adj).tocsc()


def lattice_from_cells(rows, cols, unit_spacing: float = 1.0, *, cell_ids=None,
                       obs_index=None, B=None, covariate_names=None) -> LatticeModel:
    """Build a lattice over an arbitrary set of active cells.

    Neighbours are the 4-connected active cells; inactive cells are simply
    absent, so boundary rows of ``G`` keep zero sums.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.shape != cols.shape or rows.ndim != 1:
        raise ValueError("rows and cols must be 1-d arrays of equal length")
    if len(rows) == 0:
        raise ValueError("lattice must contain at least one cell")
    if not unit_spacing > 0:
        raise ValueError("unit_spacing must be positive")
    n = len(rows)
    C = sp.diags(np.full(n, unit_spacing ** 2)).tocsc()
    G = _laplacian(rows, cols)
    return LatticeModel(
        n_rows=int(rows.max() - rows.min() + 1),
        n_cols=int(cols.max() - cols.min() + 1),
        rows=rows, cols=cols, C=C, G=G, unit_spacing=float(unit_spacing),
        obs_index=np.zeros(0, dtype=np.int64) if obs_index is None else obs_index,
        B=B, cell_ids=cell_ids, covariate_names=covariate_names,
    )


def build_lattice(n_rows: int, n_cols: int, unit_spacing: float = 1.0,
                  mask=None) -> LatticeModel:
    """Rectangular lattice with nodes in row-major order.

    ``mask`` (bool array of shape ``(n_rows, n_cols)``) drops inactive cells,
    e.g. sea cells around a coastline.
    """
    if n_rows < 1 or n_cols < 1:
        raise ValueError("grid must have at least one row and one column")
    rr, cc = np.meshgrid(np.arange(n_rows), np.arange(n_cols), indexing="ij")
    rr, cc = rr.ravel(), cc.ravel()
    if mask is not None:
        keep = np.asarray(mask, dtype=bool).ravel()
        if keep.size != rr.size:
            raise ValueError("mask shape does not match the grid")
        rr, cc = rr[keep], cc[keep]
    lat = lattice_from_cells(rr, cc, unit_spacing)
    lat.n_rows, lat.n_cols = int(n_rows), int(n_cols)
    return lat


def assemble_Q(lattice: LatticeModel, kappa: float) -> sp.csc_matrix:
    """SPDE precision ``kappa^4 C + 2 kappa^2 G + G C^-1 G`` (smoothness 1)."""
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    pattern, c, g, h = lattice.q_parts()
    k2 = kappa * kappa
    Q = pattern.copy()
    Q.data = k2 * k2 * c + 2.0 * k2 * g + h
    return Q


def laplacian_spectrum(lattice: LatticeModel) -> Optional[np.ndarray]:
    """Eigenvalues of ``G`` when ``C`` is a multiple of the identity and the
    lattice is small enough for a dense eigensolve, else ``None``."""
    if "spectrum" not in lattice.cache:
        c = lattice.C.diagonal()
        ok = lattice.N <= SPECTRUM_MAX_N and np.allclose(c, c[0], rtol=1e-14, atol=0)
        lattice.cache["spectrum"] = (scipy.linalg.eigvalsh(lattice.G.toarray())
                                     if ok else None)
    return lattice.cache["spectrum"]


def log_det_Q(lattice: LatticeModel, kappa: float) -> float:
    """``log |Q(kappa)|``.

    With ``C = c I`` the precision factors as ``(kappa^2 C + G) C^-1
    (kappa^2 C + G)``, so the determinant follows from the spectrum of
    ``G``; otherwise a sparse factorization is used.
    """
    lam = laplacian_spectrum(lattice)
    if lam is None:
        return factorize(assemble_Q(lattice, kappa)).log_det
    c = float(lattice.C.diagonal()[0])
    shifted = kappa * kappa * c + lam
    if np.any(shifted <= 0):
        raise NotPositiveDefiniteError("Q(kappa) is not positive definite")
    return float(2.0 * np.sum(np.log(shifted)) - lattice.N * np.log(c))


def assemble_joint_precision(Q, rho) -> sp.csc_matrix:
    """``rho^-1 kron Q``: the precision of ``X ~ N(0, rho kron Q^-1)``."""
    rho = np.atleast_2d(np.asarray(rho, dtype=float))
    try:
        L = np.linalg.cholesky(rho)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("rho is not symmetric positive definite") from exc
    if not np.allclose(rho, rho.T, rtol=0, atol=1e-12 * np.abs(rho).max()):
        raise NotPositiveDefiniteError("rho is not symmetric")
    Linv = scipy.linalg.solve_triangular(L, np.eye(len(rho)), lower=True)
    rho_inv = Linv.T @ Linv
    rho_inv = 0.5 * (rho_inv + rho_inv.T)
    return sp.kron(rho_inv, Q, format="csc")


class PrecisionFactor:
    """Cholesky-type factorization ``matrix = F F^T`` of an SPD matrix.

    Small matrices use a dense Cholesky. Larger ones use SuperLU with a
    symmetric fill-reducing permutation and no pivoting, which for an SPD
    matrix yields ``P A P^T = L D L^T``; then ``F = P^T L D^{1/2}``.
    """

    def __init__(self, matrix, dense_threshold: int = DENSE_THRESHOLD):
        n = matrix.shape[0]
        if matrix.shape != (n, n):
            raise ValueError("matrix must be square")
        self.n = n
        self.matrix = matrix
        if n <= dense_threshold or not sp.issparse(matrix):
            A = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=float)
            try:
                self._chol = scipy.linalg.cholesky(A, lower=True, check_finite=True)
            except (np.linalg.LinAlgError, ValueError) as exc:
                raise NotPositiveDefiniteError(str(exc)) from exc
            diag = np.diag(self._chol)
            if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
                raise NotPositiveDefiniteError("non-positive Cholesky pivot")
            self._lu = None
            self._diag = diag
            self.log_det = float(2.0 * np.sum(np.log(diag)))
            return
        A = sp.csc_matrix(matrix)
        if not np.all(np.isfinite(A.data)):
            raise NotPositiveDefiniteError("matrix has non-finite entries")
        try:
            lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                      options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise NotPositiveDefiniteError(str(exc)) from exc
        if not np.array_equal(lu.perm_r, lu.perm_c):
            raise NotPositiveDefiniteError("factorization required pivoting")
        U = lu.U
        pivots = U.diagonal()
        if not np.all(np.isfinite(pivots)) or np.any(pivots <= 0):
            raise NotPositiveDefiniteError("non-positive pivot in LDL^T factorization")
        self._chol = None
        self._lu = lu
        # U = D L^T, hence L D^{1/2} = U^T D^{-1/2}
        self._Ut = U.T
        self._sqrt_d = np.sqrt(pivots)
        self._diag = self._sqrt_d
        # F z = (L D^{1/2} z)[self._q]
        self._q = lu.perm_r
        self.log_det = float(np.sum(np.log(pivots)))

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Return ``matrix^{-1} b``."""
        if self._lu is None:
            return scipy.linalg.cho_solve((self._chol, True), b, check_finite=False)
        return self._lu.solve(np.asarray(b, dtype=float))

    def sqrt_matvec(self, z: np.ndarray) -> np.ndarray:
        """Return ``F z`` where ``matrix = F F^T``."""
        if self._lu is None:
            return self._chol @ z
        return (self._Ut @ (z / self._sqrt_d))[self._q]

    def inv_sqrt_t_matvec(self, z: np.ndarray) -> np.ndarray:
        """Return ``F^{-T} z``; has covariance ``matrix^{-1}`` for white ``z``."""
        if self._lu is None:
            return scipy.linalg.solve_triangular(self._chol, z, lower=True, trans="T",
                                                 check_finite=False)
        # F^{-T} z = A^{-1} F z
        return self.solve(self.sqrt_matvec(z))

    def factor_diagonal(self) -> np.ndarray:
        """Diagonal of the triangular factor (before any permutation)."""
        return self._diag.copy()

    def lower_factor(self):
        """Explicit ``F`` (dense or sparse); mainly for checks."""
        if self._lu is None:
            return self._chol
        perm = sp.csr_matrix(
            (np.ones(self.n), (np.arange(self.n), self._q)), shape=(self.n, self.n)
        )
        return (perm @ self._Ut @ sp.diags(1.0 / self._sqrt_d)).tocsc()


class CholmodFactor:
    """Supernodal CHOLMOD factor ``P A P^T = L L^T`` with the same interface
    as :class:`PrecisionFactor`; here ``F = P^T L``.

    The underlying symbolic object is borrowed from a pool and handed back
    once this factor is garbage-collected.
    """

    def __init__(self, matrix, symbolic, values, release):
        self.n = matrix.shape[0]
        self.matrix = matrix
        self._F = symbolic
        try:
            cholmod.numeric(values, symbolic)
        except ArithmeticError as exc:
            release(symbolic)
            raise NotPositiveDefiniteError(f"not positive definite (column {exc})") from exc
        self._diag = np.asarray(cholmod.diag(symbolic)).ravel()
        self.log_det = float(2.0 * np.sum(np.log(self._diag)))
        weakref.finalize(self, release, symbolic)

    def _solve(self, b, *systems):
        b = np.asarray(b, dtype=float)
        B = cvxopt.matrix(b.reshape(self.n, -1))
        for sys_code in systems:
            cholmod.solve(self._F, B, sys=sys_code)
        return np.asarray(B).reshape(b.shape)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Return ``matrix^{-1} b``."""
        return self._solve(b, 0)

    def inv_sqrt_t_matvec(self, z: np.ndarray) -> np.ndarray:
        """Return ``F^{-T} z = P^T L^{-T} z``."""
        return self._solve(z, 5, 8)

    def sqrt_matvec(self, z: np.ndarray) -> np.ndarray:
        """Return ``F z``, computed as ``A F^{-T} z``."""
        return self.matrix @ self.inv_sqrt_t_matvec(z)

    def factor_diagonal(self) -> np.ndarray:
        """Diagonal of ``L``."""
        return self._diag.copy()

    def lower_factor(self):
        """Dense ``F``; mainly for checks."""
        return self.matrix @ self.inv_sqrt_t_matvec(np.eye(self.n))


class OrderedFactorizer:
    """Factorizes a stream of SPD matrices sharing one sparsity pattern.

    The symbolic analysis (fill-reducing ordering and supernode structure)
    is done once per pooled factor object and reused for every numeric
    factorization. Matrices with a different pattern, or too small to
    benefit, fall back to :func:`factorize`.
    """

    def __init__(self, dense_threshold: int = DENSE_THRESHOLD):
        self.dense_threshold = dense_threshold
        self._indptr = None
        self._indices = None
        self._lower = None
        self._pool = []

    def _setup(self, A: sp.csc_matrix):
        self._indptr = A.indptr.copy()
        self._indices = A.indices.copy()
        col = np.repeat(np.arange(A.shape[1]), np.diff(A.indptr))
        self._lower = A.indices >= col
        self._I = cvxopt.matrix(A.indices[self._lower].astype(np.int64))
        self._J = cvxopt.matrix(col[self._lower].astype(np.int64))

    def _same_pattern(self, A) -> bool:
        return (A.indptr.shape == self._indptr.shape
                and A.indices.shape == self._indices.shape
                and np.array_equal(A.indptr, self._indptr)
                and np.array_equal(A.indices, self._indices))

    def _values(self, A):
        return cvxopt.spmatrix(cvxopt.matrix(A.data[self._lower]), self._I, self._J, A.shape)

    def _borrow(self, values):
        if self._pool:
            return self._pool.pop()
        saved = cholmod.options.get("supernodal")
        cholmod.options["supernodal"] = 2
        try:
            return cholmod.symbolic(values, uplo="L")
        finally:
            if saved is None:
                cholmod.options.pop("supernodal", None)
            else:
                cholmod.options["supernodal"] = saved

    def __call__(self, matrix):
        n = matrix.shape[0]
        if n <= self.dense_threshold or not sp.isspmatrix_csc(matrix):
            return factorize(matrix, self.dense_threshold)
        if not matrix.has_sorted_indices:
            matrix = matrix.sorted_indices()
        if self._indptr is None:
            self._setup(matrix)
        if not self._same_pattern(matrix):
            return factorize(matrix, self.dense_threshold)
        if not np.all(np.isfinite(matrix.data)):
            raise NotPositiveDefiniteError("matrix has non-finite entries")
        values = self._values(matrix)
        return CholmodFactor(matrix, self._borrow(values), values, self._pool.append)


def factorize(matrix, dense_threshold: int = DENSE_THRESHOLD) -> PrecisionFactor:
    """Factorize an SPD precision; raises :class:`NotPositiveDefiniteError`."""
    return PrecisionFactor(matrix, dense_threshold=dense_threshold)


def sample_gmrf(factor: PrecisionFactor, mean_shift, rng: np.random.Generator) -> np.ndarray:
    """Draw from ``N(mean_shift, matrix^{-1})`` given the factor of ``matrix``."""
    mean_shift = np.broadcast_to(np.asarray(mean_shift, dtype=float), (factor.n,))
    z = rng.standard_normal(factor.n)
    return mean_shift + factor.inv_sqrt_t_matvec(z)
