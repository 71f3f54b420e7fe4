"""Laplace approximation under Gaussian-process function-space priors.

Training adds an RKHS penalty 0.5 (f(C) - m(C))^T Sigma(C,C)^-1 (f(C) - m(C))
at freshly sampled context points to an n/b-scaled minibatch NLL. The
posterior is the low-rank factorization built around the trained weights:

1. Lanczos on the context gram Sigma(C,C), started at J(C)1/||J(C)1||,
   gives L with L L^T ~= Sigma(C,C)^-1 (small eigenvalues dropped to avoid
   pseudo-inverting noise),
2. M = J(C)^T L, then svd(M) -> (U_M, D_M) spans the prior-informed weight
   subspace (M M^T is the approximate prior precision),
3. A = D_M^2 + sum_i U_M^T J_i^T L^(i) J_i U_M projects the posterior
   precision onto that subspace (L^(i) = output Hessian of the NLL),
4. S = U_M U_A D_A^-1/2 factors the posterior covariance S S^T,
5. columns of S are dropped (smallest eigenvalues of A first) until the
   pushforward variance at every context point is bounded by the prior
   marginal variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .curvature import EPS_CLIP, lanczos_top
from .errors import DomainError, NumericalError
from .gp import GPPrior, kernel_matrix
from .linalg import chol_psd
from .nets import Batch, ModelSpec, forward, grad, jacobian, loss_value, vjp
from .optim import AdamConfig, run_adam
from .trees import ParamTree, flatten, unflatten

SAMPLERS = ("uniform_box", "halton", "train_batch")

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)


@dataclass(frozen=True)
class ContextSet:
    points: np.ndarray
    sampler: str

    def __post_init__(self):
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=np.float64)))
        if self.points.shape[0] < 1:
            raise DomainError("context set needs at least one point")

    @property
    def n(self) -> int:
        return self.points.shape[0]


def _van_der_corput(index: int, base: int) -> float:
    value, denom = 0.0, 1.0
    while index > 0:
        denom *= base
        index, digit = divmod(index, base)
        value += digit / denom
    return value


def halton(n: int, dim: int, start_index: int = 1) -> np.ndarray:
    """Halton points in [0,1)^dim with prime bases 2, 3, 5, ... per dimension."""
    if dim > len(_PRIMES):
        raise DomainError(f"halton supports up to {len(_PRIMES)} dimensions")
    out = np.empty((n, dim))
    for j in range(dim):
        base = _PRIMES[j]
        out[:, j] = [_van_der_corput(i, base) for i in range(start_index, start_index + n)]
    return out


def _as_box(domain, dim: Optional[int] = None) -> np.ndarray:
    box = np.asarray(domain, dtype=np.float64)
    if box.ndim == 1:
        box = box[None, :]
    if box.shape[1] != 2 or np.any(box[:, 0] >= box[:, 1]):
        raise DomainError(f"domain box must be rows of (lo, hi), got {domain!r}")
    if dim is not None and box.shape[0] == 1 and dim > 1:
        box = np.repeat(box, dim, axis=0)
    return box


def sample_context(
    sampler: str,
    domain,
    n: int,
    seed: int = 0,
    batch_inputs: Optional[np.ndarray] = None,
    halton_start: int = 1,
) -> ContextSet:
    """Draw context points: seeded uniforms, a Halton sequence, or the minibatch."""
    if n < 1:
        raise DomainError(f"need at least one context point, got {n}")
    if sampler == "train_batch":
        if batch_inputs is None:
            raise DomainError("train_batch sampler needs the current minibatch inputs")
        return ContextSet(np.asarray(batch_inputs)[:n], sampler)
    box = _as_box(domain)
    dim = box.shape[0]
    if sampler == "uniform_box":
        rng = np.random.default_rng(seed)
        unit = rng.uniform(size=(n, dim))
    elif sampler == "halton":
        unit = halton(n, dim, start_index=halton_start)
    else:
        raise DomainError(f"unknown context sampler {sampler!r}, expected one of {SAMPLERS}")
    points = box[:, 0] + unit * (box[:, 1] - box[:, 0])
    return ContextSet(points, sampler)


# Relative nugget added to the context gram during training. Smooth kernels
# make Sigma(C,C) numerically rank-deficient, so the exact RKHS penalty of a
# generic network is ~1/jitter and gradient descent gets glued to the
# representable manifold; a fixed nugget caps that stiffness (equivalent to
# assuming slight noise on the context values) and leaves in-RKHS targets
# essentially unpenalized.
TRAIN_GRAM_NUGGET = 1e-3


def _gram_solve(prior, context, resid, nugget):
    gram = kernel_matrix(prior.kernel, context.points)
    if nugget is not None:
        gram = gram + (nugget * float(np.mean(np.diag(gram)))) * np.eye(gram.shape[0])
    chol, _ = chol_psd(gram, name="context gram")
    return scipy.linalg.cho_solve((chol, True), resid)


def fsp_regularizer(
    model: ModelSpec,
    params: ParamTree,
    prior: GPPrior,
    context: ContextSet,
    gram_nugget: Optional[float] = None,
) -> float:
    """0.5 (f(C) - m(C))^T Sigma(C,C)^-1 (f(C) - m(C)), summed over output channels.

    Default solves with the escalating Cholesky jitter schedule; training
    passes a fixed ``gram_nugget`` instead (see TRAIN_GRAM_NUGGET).
    """
    outputs = np.atleast_2d(forward(model, params, context.points))
    resid = outputs - prior.mean(context.points, model.output_dim)
    solved = _gram_solve(prior, context, resid, gram_nugget)
    return float(0.5 * np.sum(resid * solved))


def _regularizer_grad(model, params, prior, context, gram_nugget=None) -> tuple[float, np.ndarray]:
    """Value and flat gradient of the RKHS penalty: grad = J(C)^T Sigma^-1 r."""
    outputs = np.atleast_2d(forward(model, params, context.points))
    resid = outputs - prior.mean(context.points, model.output_dim)
    solved = _gram_solve(prior, context, resid, gram_nugget)
    value = float(0.5 * np.sum(resid * solved))
    return value, vjp(model, params, context.points, solved)


def _nll_value_and_grad(model, params, batch: Batch, loss: str, obs_noise: float):
    outputs = forward(model, params, batch.inputs)
    if loss == "mse":
        value = loss_value("mse", outputs, batch.targets) / obs_noise + 0.5 * batch.n * model.output_dim * np.log(2.0 * np.pi * obs_noise)
        g = grad(model, params, batch, "mse") / obs_noise
    else:
        value = loss_value("cross_entropy", outputs, batch.targets)
        g = grad(model, params, batch, "cross_entropy")
    return float(value), g


def fsp_train(
    model: ModelSpec,
    init_params: ParamTree,
    prior: GPPrior,
    context_cfg: dict,
    data: Batch,
    batch_size: int,
    optimizer: AdamConfig,
    seed: int = 0,
    loss: str = "mse",
    obs_noise: float = 1.0,
    gram_nugget: Optional[float] = TRAIN_GRAM_NUGGET,
) -> ParamTree:
    """Minibatch RKHS-regularized training; returns the final parameters.

    Each step minimizes (n/b) * NLL(minibatch) + regularizer(fresh context).
    ``context_cfg`` holds {"sampler", "n", "domain"}. Fully deterministic
    given the seed (batch order, context draws, and optimizer state).
    """
    n = data.n
    if batch_size > n:
        raise DomainError(f"batch size {batch_size} exceeds dataset size {n}")
    sampler = context_cfg.get("sampler", "uniform_box")
    n_context = int(context_cfg.get("n", 16))
    domain = context_cfg.get("domain")
    rng = np.random.default_rng(seed)
    template = init_params

    order = rng.permutation(n)
    cursor = 0

    def next_batch():
        nonlocal order, cursor
        if cursor + batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + batch_size]
        cursor += batch_size
        return Batch(data.inputs[idx], data.targets[idx])

    scale = n / batch_size

    def value_and_grad(x, step):
        params = unflatten(x, template)
        batch = next_batch()
        if sampler == "train_batch":
            context = ContextSet(batch.inputs, sampler)
        elif sampler == "halton":
            context = sample_context(
                sampler, domain, n_context, halton_start=1 + (step - 1) * n_context
            )
        else:
            context = sample_context(
                sampler, domain, n_context, seed=int(rng.integers(0, 2**63 - 1))
            )
        nll, nll_grad = _nll_value_and_grad(model, params, batch, loss, obs_noise)
        reg, reg_grad = _regularizer_grad(model, params, prior, context, gram_nugget)
        return scale * nll + reg, scale * nll_grad + reg_grad

    final, _ = run_adam(value_and_grad, flatten(init_params), optimizer)
    return unflatten(final, template)


@dataclass(frozen=True)
class FspPosterior:
    """Gaussian N(theta*, S S^T) with the truncated low-rank factor S."""

    params: ParamTree
    factor: np.ndarray  # (P, r - k)
    truncation_index: int
    eigenvalues: np.ndarray  # kept eigenvalues of A, ascending
    diagnostics: dict = field(default_factory=dict)


def _per_datum_output_hessian(outputs: np.ndarray, loss: str, obs_noise: float) -> np.ndarray:
    """L^(i) = d^2/df^2 [-log p(y | f)] as (N, C, C)."""
    n, c = outputs.shape
    if loss == "mse":
        return np.tile(np.eye(c) / obs_noise, (n, 1, 1))
    shifted = outputs - outputs.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    return np.einsum("nc,cd->ncd", p, np.eye(c)) - np.einsum("nc,nd->ncd", p, p)


def fsp_posterior(
    model: ModelSpec,
    prior: GPPrior,
    context: ContextSet,
    data: Optional[Batch],
    params: ParamTree,
    loss: str = "mse",
    obs_noise: float = 1.0,
    lanczos_rank: int = 500,
    lanczos_tol: float = 1e-10,
    seed: int = 0,
) -> FspPosterior:
    """Low-rank function-space Laplace posterior with rank truncation."""
    out = model.output_dim
    pts = context.points
    n_rows = context.n * out

    jac_context = jacobian(model, params, pts).reshape(n_rows, -1)  # rows point-major
    dim = jac_context.shape[1]

    gram = kernel_matrix(prior.kernel, pts)
    sigma = gram if out == 1 else np.kron(gram, np.eye(out))

    start = jac_context @ np.ones(dim)
    norm = np.linalg.norm(start)
    start = start / norm if norm > 1e-300 else None

    rank = min(n_rows, lanczos_rank)
    vecs, vals, _, _ = lanczos_top(
        lambda v: sigma @ v, n_rows, rank, start=start, seed=seed, tol=lanczos_tol
    )
    keep = vals > EPS_CLIP * max(float(vals.max(initial=0.0)), 0.0)
    if not np.any(keep):
        raise NumericalError("context gram has no usable eigenvalues")
    low_rank_l = vecs[:, keep] / np.sqrt(vals[keep])  # L L^T ~= Sigma^-1

    m = jac_context.T @ low_rank_l  # (P, r)
    u_m, d_m, _ = np.linalg.svd(m, full_matrices=False)

    a = np.diag(d_m**2)
    if data is not None and data.n > 0:
        outputs = np.atleast_2d(forward(model, params, data.inputs))
        hess = _per_datum_output_hessian(outputs, loss, obs_noise)
        ju = np.einsum("ncp,pr->ncr", jacobian(model, params, data.inputs), u_m)
        a = a + np.einsum("ncr,ncd,nds->rs", ju, hess, ju)
    a = 0.5 * (a + a.T)

    eig_vals, eig_vecs = np.linalg.eigh(a)  # ascending
    clip = EPS_CLIP * max(float(np.abs(eig_vals).max(initial=0.0)), 0.0)
    keep = eig_vals > clip
    if not np.any(keep):
        raise NumericalError("posterior projection has no positive eigenvalues (degenerate)")
    eig_vals, eig_vecs = eig_vals[keep], eig_vecs[:, keep]

    factor = (u_m @ eig_vecs) / np.sqrt(eig_vals)  # columns: most unstable first
    pushed = jac_context @ factor  # (n_rows, r)
    prior_marginal = np.diag(sigma)

    r = factor.shape[1]
    trunc = r
    for k in range(r + 1):
        var = np.sum(pushed[:, k:] ** 2, axis=1)
        if np.all(var <= prior_marginal):
            trunc = k
            break
    return FspPosterior(
        params=params,
        factor=factor[:, trunc:],
        truncation_index=trunc,
        eigenvalues=eig_vals,
        diagnostics={
            "gram_rank": int(low_rank_l.shape[1]),
            "projection_rank": int(r),
            "kept_rank": int(r - trunc),
            "truncated_all": bool(trunc == r),
        },
    )


def fsp_predict(model: ModelSpec, post: FspPosterior, x) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and per-output variance diag(J S S^T J^T) at each row of x."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    mean = np.atleast_2d(forward(model, post.params, x))
    jac = jacobian(model, post.params, x)
    if post.factor.shape[1] == 0:
        return mean, np.zeros_like(mean)
    js = np.einsum("ncp,pk->nck", jac, post.factor)
    return mean, np.sum(js**2, axis=2)


def fsp_sample(post: FspPosterior, seed: int, n: int) -> list[ParamTree]:
    """Seeded posterior draws theta* + S eps."""
    if n < 1:
        raise DomainError(f"need n >= 1 samples, got {n}")
    rng = np.random.default_rng(seed)
    flat = flatten(post.params)
    r = post.factor.shape[1]
    draws = []
    for _ in range(n):
        eps = rng.standard_normal(r)
        draws.append(unflatten(flat + post.factor @ eps, post.params))
    return draws
