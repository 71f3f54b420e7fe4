"""Matrix-free curvature operators and their structural estimators.

A :class:`CurvatureOperator` is a symmetric linear map v -> Cv on R^P closed
over a model, a loss, and a dataset; Hessian- and GGN-vector products are the
two constructors. Estimators compress an operator into one of three
structures: a dense symmetric matrix, its diagonal, or a low-rank
eigendecomposition obtained by a custom Lanczos routine (full
reorthogonalization, seeded uniform-sphere start) or by LOBPCG.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse.linalg

from .errors import DimensionError, DomainError, ResourceError
from .nets import Batch, ModelSpec, ggn_vec, hessian_vec
from .trees import ParamTree, tree_size

# Relative threshold below which Ritz values are dropped: curvature is PSD up
# to roundoff, and near-zero/negative Ritz noise would corrupt the
# inverse-square-root transform downstream.
EPS_CLIP = 1e-10

FULL_ESTIMATE_CAP = 20000


class CurvatureOperator:
    """Immutable symmetric map v -> Cv with a matvec counter.

    ``apply`` is safe to call concurrently; the counter is instrumentation
    (used to compare eigensolver costs) and is the only mutable state.
    """

    def __init__(self, apply_fn, dim: int, kind: str):
        self._apply_fn = apply_fn
        self.dim = int(dim)
        self.kind = kind
        self._matvecs = 0
        self._lock = threading.Lock()

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != self.dim:
            raise DimensionError(f"operator dim {self.dim}, vector has {v.size}")
        with self._lock:
            self._matvecs += 1
        return self._apply_fn(v)

    @property
    def matvec_count(self) -> int:
        return self._matvecs


def _as_batches(data) -> tuple:
    if isinstance(data, Batch):
        batches = (data,)
    else:
        batches = tuple(data)
    if not batches:
        raise DomainError("curvature requires at least one batch of data")
    if not all(isinstance(b, Batch) for b in batches):
        raise DomainError("data must be a Batch or an iterable of Batch")
    return batches


def ggn_vp(model: ModelSpec, loss: str, data, params: ParamTree) -> CurvatureOperator:
    """Sum over data of J^T Lambda J as a matrix-free operator.

    Lambda is the output Hessian of the loss at the current predictions:
    the identity for mse, diag(p) - p p^T for cross_entropy.
    """
    batches = _as_batches(data)
    dim = tree_size(params)

    def apply_fn(v):
        acc = np.zeros(dim)
        for batch in batches:
            acc += ggn_vec(model, params, batch.inputs, loss, v)
        return acc

    return CurvatureOperator(apply_fn, dim, "ggn")


def hessian_vp(model: ModelSpec, loss: str, data, params: ParamTree) -> CurvatureOperator:
    """Exact loss Hessian over the dataset, as derivative-of-gradient products."""
    batches = _as_batches(data)
    dim = tree_size(params)

    def apply_fn(v):
        acc = np.zeros(dim)
        for batch in batches:
            acc += hessian_vec(model, params, batch, loss, v)
        return acc

    return CurvatureOperator(apply_fn, dim, "hessian")


def restrict_operator(op: CurvatureOperator, indices: np.ndarray) -> CurvatureOperator:
    """Sub-operator on the given flat coordinates (sub-network Laplace).

    Equals the principal submatrix C[idx, idx] of the parent operator.
    """
    indices = np.asarray(indices, dtype=np.intp)

    def apply_fn(v_sub):
        full = np.zeros(op.dim)
        full[indices] = v_sub
        return op.apply(full)[indices]

    return CurvatureOperator(apply_fn, len(indices), op.kind)


@dataclass(frozen=True)
class CurvEstimate:
    """Tagged union: Full(dense) | Diagonal(vector) | LowRank(U, S)."""

    kind: str
    matrix: Optional[np.ndarray] = None
    diag: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    s: Optional[np.ndarray] = None
    converged: bool = True
    matvecs: int = 0

    @property
    def dim(self) -> int:
        if self.kind == "full":
            return self.matrix.shape[0]
        if self.kind == "diagonal":
            return self.diag.shape[0]
        return self.u.shape[0]

    @property
    def rank(self) -> Optional[int]:
        return self.s.shape[0] if self.kind == "low_rank" else None

    @classmethod
    def full(cls, matrix, matvecs=0):
        return cls("full", matrix=np.asarray(matrix, dtype=np.float64), matvecs=matvecs)

    @classmethod
    def diagonal(cls, diag, matvecs=0):
        return cls("diagonal", diag=np.asarray(diag, dtype=np.float64), matvecs=matvecs)

    @classmethod
    def low_rank(cls, u, s, converged=True, matvecs=0):
        return cls(
            "low_rank",
            u=np.asarray(u, dtype=np.float64),
            s=np.asarray(s, dtype=np.float64),
            converged=converged,
            matvecs=matvecs,
        )

    def to_dict(self) -> dict:
        if self.kind == "full":
            data = self.matrix.tolist()
        elif self.kind == "diagonal":
            data = self.diag.tolist()
        else:
            data = {"u": self.u.tolist(), "s": self.s.tolist()}
        return {
            "kind": self.kind,
            "data": data,
            "rank": self.rank,
            "converged": bool(self.converged),
            "matvecs": int(self.matvecs),
        }

    def spectrum(self) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """(eigenvalues, eigenvectors) of the estimate; cached for full.

        Lets hyperparameter objectives evaluate log-dets and covariance
        quadratics in O(P) per call instead of refactorizing H(tau, sigma2).
        Diagonal returns (diag, None); low rank returns (S, U).
        """
        if self.kind == "diagonal":
            return self.diag, None
        if self.kind == "low_rank":
            return self.s, self.u
        cached = getattr(self, "_spectrum", None)
        if cached is None:
            cached = np.linalg.eigh(self.matrix)
            object.__setattr__(self, "_spectrum", cached)
        return cached

    @classmethod
    def from_dict(cls, payload: dict) -> "CurvEstimate":
        kind = payload["kind"]
        converged = bool(payload.get("converged", True))
        matvecs = int(payload.get("matvecs", 0))
        if kind == "full":
            return cls.full(payload["data"], matvecs)
        if kind == "diagonal":
            return cls.diagonal(payload["data"], matvecs)
        if kind == "low_rank":
            est = cls.low_rank(payload["data"]["u"], payload["data"]["s"], converged, matvecs)
            return est
        raise DomainError(f"unknown estimate kind {kind!r}")


def estimate_full(op: CurvatureOperator, cap: int = FULL_ESTIMATE_CAP) -> CurvEstimate:
    """Materialize the operator column by column and symmetrize."""
    if op.dim > cap:
        raise ResourceError(
            f"dense estimate of a {op.dim}-dim operator exceeds the cap {cap}; "
            "use a low-rank estimator instead"
        )
    before = op.matvec_count
    cols = np.empty((op.dim, op.dim))
    basis = np.zeros(op.dim)
    for i in range(op.dim):
        basis[i] = 1.0
        cols[:, i] = op.apply(basis)
        basis[i] = 0.0
    matrix = 0.5 * (cols + cols.T)
    return CurvEstimate.full(matrix, matvecs=op.matvec_count - before)


def estimate_diagonal(op: CurvatureOperator) -> CurvEstimate:
    """Diagonal entries e_i^T C e_i via basis-vector products."""
    before = op.matvec_count
    diag = np.empty(op.dim)
    basis = np.zeros(op.dim)
    for i in range(op.dim):
        basis[i] = 1.0
        diag[i] = op.apply(basis)[i]
        basis[i] = 0.0
    return CurvEstimate.diagonal(diag, matvecs=op.matvec_count - before)


def _fix_signs(u: np.ndarray) -> np.ndarray:
    """Make the first nonzero component of each column positive (determinism)."""
    u = u.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
    return u


def _finalize_pairs(u: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sort descending, drop Ritz noise below EPS_CLIP * max(S), fix signs."""
    order = np.argsort(s)[::-1]
    s, u = s[order], u[:, order]
    smax = s[0] if s.size else 0.0
    keep = s > EPS_CLIP * max(smax, 0.0) if smax > 0 else np.zeros(s.shape, dtype=bool)
    return _fix_signs(u[:, keep]), s[keep]


def lanczos_top(
    matvec,
    dim: int,
    rank: int,
    *,
    start: Optional[np.ndarray] = None,
    seed: int = 0,
    tol: float = 1e-8,
    max_iters: Optional[int] = None,
):
    """Top-``rank`` eigenpairs of a symmetric matvec by Lanczos.

    Full reorthogonalization against all previous basis vectors; on exact
    breakdown (invariant subspace) the iteration restarts with a fresh
    random direction, making T block-tridiagonal. Returns
    (U, S descending, converged, iterations).
    """
    if not 1 <= rank <= dim:
        raise DomainError(f"rank must be in [1, {dim}], got {rank}")
    rng = np.random.default_rng(seed)
    m_max = dim if max_iters is None else min(dim, max(max_iters, rank))
    m_max = max(m_max, min(dim, rank))

    basis = np.zeros((dim, m_max))
    tmat = np.zeros((m_max, m_max))
    if start is None:
        q = rng.standard_normal(dim)
    else:
        q = np.asarray(start, dtype=np.float64).copy()
    norm = np.linalg.norm(q)
    if norm < 1e-300:
        q = rng.standard_normal(dim)
        norm = np.linalg.norm(q)
    q /= norm

    beta_prev = 0.0
    q_prev = np.zeros(dim)
    m = 0
    converged = False
    check_every = 5
    while m < m_max:
        basis[:, m] = q
        w = matvec(q)
        alpha = float(q @ w)
        tmat[m, m] = alpha
        w = w - alpha * q - beta_prev * q_prev
        # Full reorthogonalization, twice for numerical safety.
        active = basis[:, : m + 1]
        w -= active @ (active.T @ w)
        w -= active @ (active.T @ w)
        beta = float(np.linalg.norm(w))
        m += 1

        scale = max(np.max(np.abs(np.diag(tmat[:m, :m]))), beta, 1e-300)
        if m >= min(rank, dim) and (m % check_every == 0 or m == m_max or beta <= 1e-13 * scale):
            vals, vecs = np.linalg.eigh(tmat[:m, :m])
            top = min(rank, m)
            idx = np.argsort(vals)[::-1][:top]
            smax = max(np.max(np.abs(vals)), 1e-300)
            bounds = beta * np.abs(vecs[m - 1, idx])
            if np.all(bounds <= tol * smax) and m >= min(rank, dim):
                converged = True
                break
        if m == m_max or m == dim:
            break
        if beta <= 1e-13 * scale:
            # Invariant subspace: restart with a random orthogonal direction.
            fresh = rng.standard_normal(dim)
            active = basis[:, :m]
            fresh -= active @ (active.T @ fresh)
            fresh -= active @ (active.T @ fresh)
            fnorm = np.linalg.norm(fresh)
            if fnorm < 1e-12:
                break
            q = fresh / fnorm
            q_prev = np.zeros(dim)
            beta_prev = 0.0
        else:
            tmat[m - 1, m] = tmat[m, m - 1] = beta
            q_prev, q = q, w / beta
            beta_prev = beta

    vals, vecs = np.linalg.eigh(tmat[:m, :m])
    top = min(rank, m)
    idx = np.argsort(vals)[::-1][:top]
    s = vals[idx]
    u = basis[:, :m] @ vecs[:, idx]
    if m >= dim:
        converged = True
    return u, s, converged, m


def _residual_ok(matvec, u: np.ndarray, s: np.ndarray, tol: float) -> bool:
    if s.size == 0:
        return True
    smax = np.max(np.abs(s))
    for i in range(s.shape[0]):
        res = np.linalg.norm(matvec(u[:, i]) - s[i] * u[:, i])
        if res > tol * max(smax, 1e-300):
            return False
    return True


def estimate_lanczos(
    op: CurvatureOperator,
    rank: int,
    seed: int = 0,
    tol: float = 1e-8,
    max_iters: Optional[int] = None,
) -> CurvEstimate:
    """Top-``rank`` eigenpairs of the operator via the custom Lanczos routine."""
    before = op.matvec_count
    u, s, converged, _ = lanczos_top(
        op.apply, op.dim, rank, seed=seed, tol=tol, max_iters=max_iters
    )
    u, s = _finalize_pairs(u, s)
    if s.size and not _residual_ok(op.apply, u, s, tol):
        converged = False
    return CurvEstimate.low_rank(u, s, converged=converged, matvecs=op.matvec_count - before)


def estimate_lobpcg(
    op: CurvatureOperator,
    rank: int,
    block_size: Optional[int] = None,
    seed: int = 0,
    tol: float = 1e-8,
    max_iters: int = 500,
) -> CurvEstimate:
    """Top-``rank`` eigenpairs via scipy's LOBPCG with a seeded start block."""
    if not 1 <= rank <= op.dim:
        raise DomainError(f"rank must be in [1, {op.dim}], got {rank}")
    before = op.matvec_count
    block = min(op.dim, max(rank, block_size or rank))
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((op.dim, block))
    x0, _ = np.linalg.qr(x0)
    linop = scipy.sparse.linalg.LinearOperator(
        (op.dim, op.dim), matvec=op.apply, dtype=np.float64
    )
    with warnings.catch_warnings():
        # scipy warns (harmlessly, for our desk scale) when the block is
        # large relative to the problem and it switches to a dense path.
        warnings.simplefilter("ignore")
        vals, vecs = scipy.sparse.linalg.lobpcg(
            linop, x0, largest=True, tol=tol, maxiter=max_iters
        )
    order = np.argsort(vals)[::-1][:rank]
    u, s = _finalize_pairs(vecs[:, order], vals[order])
    converged = _residual_ok(op.apply, u, s, tol)
    return CurvEstimate.low_rank(u, s, converged=converged, matvecs=op.matvec_count - before)
