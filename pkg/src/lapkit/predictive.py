"""Class probabilities from a Gaussian over logits.

Five approximations to the softmax-Gaussian integral: Monte Carlo
averaging, the moment-matched Dirichlet (Laplace bridge), and three
mean-field/probit closures of increasing order. Every predictive returns a
simplex vector and reduces to softmax(mu) at zero covariance; the
first-order exponent uses (mu_k - mu_i) so that this reduction holds
exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, DomainError
from .linalg import chol_psd

# Probit-matching constant lambda_0; the standard choice pi/8.
MEAN_FIELD_SCALE = math.pi / 8.0

PREDICTIVES = ("mc_bridge", "laplace_bridge", "mean_field_0", "mean_field_1", "mean_field_2")


def _check_gaussian(mean, cov) -> tuple[np.ndarray, np.ndarray]:
    mean = np.asarray(mean, dtype=np.float64).ravel()
    cov = np.asarray(cov, dtype=np.float64)
    c = mean.shape[0]
    if cov.shape != (c, c):
        raise DimensionError(f"cov shape {cov.shape} != ({c}, {c})")
    return mean, cov


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def mc_bridge(mean, cov, n_samples: int, seed: int = 0) -> np.ndarray:
    """Average softmax over seeded Gaussian logit draws."""
    mean, cov = _check_gaussian(mean, cov)
    if n_samples < 1:
        raise DomainError(f"need n_samples >= 1, got {n_samples}")
    if not np.any(cov):
        return _softmax(mean)
    chol, _ = chol_psd(cov, name="logit covariance")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, mean.shape[0]))
    probs = _softmax(mean + eps @ chol.T)
    return probs.mean(axis=0)


def laplace_bridge(mean, cov) -> np.ndarray:
    """Moment-matched Dirichlet predictive mean.

    The logit Gaussian is rescaled by c = sqrt(C/2) / sum_c sigma_c^2
    (mu by sqrt(c), variances by c), mapped to Dirichlet concentrations
    alpha_c = (1/sigma_c^2)(1 - 2/C + e^{mu_c}/C^2 * sum e^{-mu}), and the
    normalized concentrations are returned. Zero total variance falls back
    to softmax(mu).
    """
    mean, cov = _check_gaussian(mean, cov)
    c = mean.shape[0]
    var = np.diag(cov).copy()
    total = float(var.sum())
    if total <= 0.0:
        return _softmax(mean)
    if np.any(var <= 0):
        raise DomainError("laplace_bridge needs positive per-class variances")
    scale = math.sqrt(c / 2.0) / total
    mu = math.sqrt(scale) * mean
    sigma2 = scale * var
    # exp(mu_c) * sum exp(-mu) computed in log space for stability
    log_sum_exp_neg = _log_sum_exp(-mu)
    alpha = (1.0 - 2.0 / c + np.exp(mu + log_sum_exp_neg) / c**2) / sigma2
    return alpha / alpha.sum()


def _log_sum_exp(z: np.ndarray) -> float:
    m = float(z.max())
    return m + math.log(float(np.exp(z - m).sum()))


def mean_field_0(mean, cov, scale: float = MEAN_FIELD_SCALE) -> np.ndarray:
    """softmax of mu_i / sqrt(1 + lambda_0 Sigma_ii)."""
    mean, cov = _check_gaussian(mean, cov)
    var = np.diag(cov)
    if np.any(var < 0):
        raise DomainError("negative logit variance")
    return _softmax(mean / np.sqrt(1.0 + scale * var))


def _pairwise_mean_field(mean: np.ndarray, pooled_var: np.ndarray, scale: float) -> np.ndarray:
    c = mean.shape[0]
    diff = mean[None, :] - mean[:, None]  # diff[i, k] = mu_k - mu_i
    denom = np.sqrt(1.0 + scale * np.maximum(pooled_var, 0.0))
    expo = np.exp(diff / denom)
    np.fill_diagonal(expo, 0.0)
    probs = 1.0 / (1.0 + expo.sum(axis=1))
    return probs / probs.sum()


def mean_field_1(mean, cov, scale: float = MEAN_FIELD_SCALE) -> np.ndarray:
    """Pairwise probit closure pooling the two per-class variances."""
    mean, cov = _check_gaussian(mean, cov)
    var = np.diag(cov)
    pooled = var[None, :] + var[:, None]
    return _pairwise_mean_field(mean, pooled, scale)


def mean_field_2(mean, cov, scale: float = MEAN_FIELD_SCALE) -> np.ndarray:
    """Pairwise closure on the variance of the logit difference.

    Pools Sigma_kk + Sigma_ii - 2 Sigma_ik (clamped at 0), so perfectly
    correlated logits reduce exactly to softmax(mu) and a diagonal Sigma
    reduces to mean_field_1.
    """
    mean, cov = _check_gaussian(mean, cov)
    var = np.diag(cov)
    pooled = var[None, :] + var[:, None] - 2.0 * cov
    return _pairwise_mean_field(mean, pooled, scale)


def predictive_by_name(name: str):
    if name == "mc_bridge":
        return mc_bridge
    if name == "laplace_bridge":
        return laplace_bridge
    if name == "mean_field_0":
        return mean_field_0
    if name == "mean_field_1":
        return mean_field_1
    if name == "mean_field_2":
        return mean_field_2
    raise DomainError(f"unknown predictive {name!r}, expected one of {PREDICTIVES}")
