"""Structured Gaussian weight posteriors N(theta*, H^-1).

``posterior_fn`` turns a curvature estimate plus hyperparameters into a
:class:`PosteriorState` whose precision is H = Curv/sigma^2 + tau*I (the
1/sigma^2 scaling implements the Gaussian-likelihood curvature
hyperparameter; classification pipelines pin sigma^2 = 1, which makes the
scaling a no-op). Each structure precomputes its own factors:

* full:     lower Cholesky L_H of H; covariance by triangular solves, scale
            is L_H^-T (so scale @ scale^T = H^-1, matching the dense
            multivariate-normal convention),
* diagonal: d_i = c_i/sigma^2 + tau; everything elementwise,
* low-rank: Woodbury covariance and the inverse-square-root map
            v -> tau^-1/2 v + U (s_bar * (U^T v)) with
            s_bar = (S + tau)^-1/2 - tau^-1/2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .curvature import CurvEstimate
from .errors import DimensionError, DomainError
from .linalg import chol_psd
from .trees import ParamTree, flatten, unflatten


@dataclass(frozen=True)
class Hyperparams:
    """Prior precision tau and observation noise sigma^2 (1 for classification)."""

    prior_prec: float
    obs_noise: float = 1.0

    def __post_init__(self):
        if not (self.prior_prec > 0):
            raise DomainError(f"prior_prec must be > 0, got {self.prior_prec}")
        if not (self.obs_noise > 0):
            raise DomainError(f"obs_noise must be > 0, got {self.obs_noise}")


class PosteriorState:
    """Gaussian weight posterior with precision/covariance/scale operators."""

    def __init__(self, kind: str, hp: Hyperparams, dim: int, factors: dict):
        self.kind = kind
        self.hp = hp
        self.dim = dim
        self._f = factors

    def _check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).ravel()
        if v.size != self.dim:
            raise DimensionError(f"posterior dim {self.dim}, vector has {v.size}")
        return v

    def precision_vp(self, v) -> np.ndarray:
        """H v."""
        v = self._check(v)
        tau = self.hp.prior_prec
        if self.kind == "full":
            return self._f["h"] @ v
        if self.kind == "diagonal":
            return self._f["d"] * v
        u, s = self._f["u"], self._f["s"]
        return u @ (s * (u.T @ v)) + tau * v

    def cov_vp(self, v) -> np.ndarray:
        """H^-1 v."""
        v = self._check(v)
        tau = self.hp.prior_prec
        if self.kind == "full":
            return scipy.linalg.cho_solve((self._f["chol"], True), v)
        if self.kind == "diagonal":
            return v / self._f["d"]
        u, s = self._f["u"], self._f["s"]
        if s.size == 0:
            return v / tau
        # Woodbury: (U S U^T + tau I)^-1 = I/tau - U ((1/S + 1/tau)^-1) U^T / tau^2
        core = 1.0 / (1.0 / s + 1.0 / tau)
        return v / tau - u @ (core * (u.T @ v)) / tau**2

    def scale_vp(self, v) -> np.ndarray:
        """L v with L L^T = H^-1."""
        v = self._check(v)
        tau = self.hp.prior_prec
        if self.kind == "full":
            return scipy.linalg.solve_triangular(self._f["chol"], v, lower=True, trans="T")
        if self.kind == "diagonal":
            return v / np.sqrt(self._f["d"])
        u, s_bar = self._f["u"], self._f["s_bar"]
        out = v / np.sqrt(tau)
        if s_bar.size:
            out = out + u @ (s_bar * (u.T @ v))
        return out


def posterior_fn(estimate: CurvEstimate, hp: Hyperparams) -> PosteriorState:
    """Build the posterior state for a curvature estimate and hyperparameters."""
    tau, sigma2 = hp.prior_prec, hp.obs_noise
    dim = estimate.dim
    if estimate.kind == "full":
        h = estimate.matrix / sigma2 + tau * np.eye(dim)
        if not np.all(np.isfinite(h)):
            raise DomainError("curvature estimate contains non-finite entries")
        chol, _ = chol_psd(h, name="posterior precision")
        return PosteriorState("full", hp, dim, {"h": h, "chol": chol})
    if estimate.kind == "diagonal":
        d = estimate.diag / sigma2 + tau
        if not np.all(np.isfinite(d)):
            raise DomainError("curvature estimate contains non-finite entries")
        return PosteriorState("diagonal", hp, dim, {"d": d})
    if estimate.kind == "low_rank":
        s = estimate.s / sigma2
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(estimate.u))):
            raise DomainError("curvature estimate contains non-finite entries")
        s_bar = 1.0 / np.sqrt(s + tau) - 1.0 / np.sqrt(tau)
        return PosteriorState(
            "low_rank", hp, dim, {"u": estimate.u, "s": s, "s_bar": s_bar}
        )
    raise DomainError(f"unknown estimate kind {estimate.kind!r}")


def cov_block(state: PosteriorState, mat: np.ndarray) -> np.ndarray:
    """H^-1 applied to the columns of ``mat`` (vectorized cov_vp)."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim == 1:
        return state.cov_vp(mat)
    if mat.shape[0] != state.dim:
        raise DimensionError(f"posterior dim {state.dim}, block has {mat.shape[0]} rows")
    if state.kind == "full":
        return scipy.linalg.cho_solve((state._f["chol"], True), mat)
    if state.kind == "diagonal":
        return mat / state._f["d"][:, None]
    tau = state.hp.prior_prec
    u, s = state._f["u"], state._f["s"]
    if s.size == 0:
        return mat / tau
    core = 1.0 / (1.0 / s + 1.0 / tau)
    return mat / tau - u @ (core[:, None] * (u.T @ mat)) / tau**2


def sample(state: PosteriorState, center, seed: int, n: int):
    """Draw ``n`` posterior samples theta* + L eps, eps ~ N(0, I), seeded.

    ``center`` may be a ParamTree (returns a list of trees) or a flat vector
    (returns an (n, P) array).
    """
    if n < 1:
        raise DomainError(f"need n >= 1 samples, got {n}")
    as_tree = isinstance(center, dict)
    flat = flatten(center) if as_tree else np.asarray(center, dtype=np.float64).ravel()
    if flat.size != state.dim:
        raise DimensionError(f"center has {flat.size} coords, posterior dim {state.dim}")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, state.dim))
    draws = np.stack([flat + state.scale_vp(eps[i]) for i in range(n)])
    if as_tree:
        return [unflatten(row, center) for row in draws]
    return draws
