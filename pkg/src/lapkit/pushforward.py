"""Propagate weight-space uncertainty to output space.

Linear pushforward: close the Gaussian under the network linearisation,
cov = J H^-1 J^T, assembled from C vjp calls (rows of J), C covariance
solves, and C jvp contractions -- so the adjoint identity tests cover the
exact code path used here. Nonlinear pushforward: sample weights, run the
network, keep the ensemble. Points are treated independently; no
cross-input covariance is produced.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DimensionError, DomainError
from .nets import ModelSpec, forward, jvp, vjp
from .posterior import PosteriorState, sample
from .trees import ParamTree, flatten, unflatten


@dataclass(frozen=True)
class OutputGaussian:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).ravel())
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=np.float64))
        c = self.mean.shape[0]
        if self.cov.shape != (c, c):
            raise DimensionError(f"cov shape {self.cov.shape} != ({c}, {c})")


@dataclass(frozen=True)
class Ensemble:
    samples: np.ndarray
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "samples", np.atleast_2d(np.asarray(self.samples, dtype=np.float64)))


def _single_point(model: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2 and x.shape[0] == 1:
        x = x[0]
    if x.ndim != 1:
        raise DimensionError("pushforward evaluates one input point at a time")
    return x


def linear_pushforward(
    model: ModelSpec,
    params: ParamTree,
    state: PosteriorState,
    x,
    active: Optional[np.ndarray] = None,
) -> OutputGaussian:
    """N(f(x, theta*), J H^-1 J^T) at a single input point.

    ``active`` restricts the Jacobian to the posterior's coordinates for
    sub-network posteriors; masked-out coordinates are deterministic.
    """
    x = _single_point(model, x)
    mean = forward(model, params, x)
    c = model.output_dim
    if active is not None:
        active = np.asarray(active, dtype=np.intp)
    if state.dim == 0:
        return OutputGaussian(mean, np.zeros((c, c)))
    full_dim = flatten(params).size
    cov = np.empty((c, c))
    for cls in range(c):
        unit = np.zeros(c)
        unit[cls] = 1.0
        row = vjp(model, params, x, unit)
        if active is not None:
            row = row[active]
        if row.size != state.dim:
            raise DimensionError(
                f"posterior dim {state.dim} does not match Jacobian row size {row.size}"
            )
        solved = state.cov_vp(row)
        if active is not None:
            lifted = np.zeros(full_dim)
            lifted[active] = solved
        else:
            lifted = solved
        cov[:, cls] = jvp(model, params, x, lifted)
    cov = 0.5 * (cov + cov.T)
    return OutputGaussian(mean, cov)


def nonlinear_pushforward(
    model: ModelSpec,
    params: ParamTree,
    state: PosteriorState,
    x,
    n_samples: int,
    seed: int,
    active: Optional[np.ndarray] = None,
) -> Ensemble:
    """Sample weights from the posterior and run the network at ``x``."""
    if n_samples < 1:
        raise DomainError(f"need n_samples >= 1, got {n_samples}")
    x = _single_point(model, x)
    flat = flatten(params)
    if active is not None:
        active = np.asarray(active, dtype=np.intp)
        center = flat[active]
    else:
        center = flat
    if state.dim == 0:
        out = forward(model, params, x)
        return Ensemble(np.tile(out, (n_samples, 1)), seed)
    draws = sample(state, center, seed, n_samples)
    outputs = np.empty((n_samples, model.output_dim))
    for i in range(n_samples):
        theta = flat.copy()
        if active is not None:
            theta[active] = draws[i]
        else:
            theta = draws[i]
        outputs[i] = forward(model, unflatten(theta, params), x)
    return Ensemble(outputs, seed)


def ensemble_predict(
    model: ModelSpec,
    params: ParamTree,
    state: PosteriorState,
    x,
    n_samples: int,
    seed: int,
    active: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One shared set of weight draws evaluated over a whole batch.

    Returns (S, N, C); marginals at each point match per-point
    ``nonlinear_pushforward`` in distribution, but the draws are shared so
    batch evaluation costs S forward passes instead of S*N.
    """
    if n_samples < 1:
        raise DomainError(f"need n_samples >= 1, got {n_samples}")
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    flat = flatten(params)
    if active is not None:
        active = np.asarray(active, dtype=np.intp)
        center = flat[active]
    else:
        center = flat
    outputs = np.empty((n_samples, x2.shape[0], model.output_dim))
    if state.dim == 0:
        outputs[:] = forward(model, params, x2)
        return outputs
    draws = sample(state, center, seed, n_samples)
    for i in range(n_samples):
        theta = flat.copy()
        if active is not None:
            theta[active] = draws[i]
        else:
            theta = draws[i]
        outputs[i] = forward(model, unflatten(theta, params), x2)
    return outputs


def ensemble_stats(ensemble: Ensemble) -> dict:
    """Per-coordinate mean/std and the unbiased sample covariance."""
    samples = ensemble.samples
    if samples.shape[0] < 2:
        raise DomainError("moment estimates need at least 2 ensemble members")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (samples.shape[0] - 1)
    return {"mean": mean, "std": np.sqrt(np.diag(cov)), "cov": cov}
