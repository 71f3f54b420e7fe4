"""Uncertainty-quality metrics: Gaussian NLL, top-label ECE, Gaussian CRPS."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import norm

from .errors import DomainError

ECE_BINS = 15


def gaussian_nll(mean, variance, target) -> float:
    """0.5 log(2 pi sigma^2) + (y - mu)^2 / (2 sigma^2), averaged when batched."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = np.asarray(variance, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(variance <= 0):
        raise DomainError("gaussian_nll needs positive variances")
    nll = 0.5 * np.log(2.0 * math.pi * variance) + (target - mean) ** 2 / (2.0 * variance)
    return float(np.mean(nll))


def ece(probs, labels, n_bins: int = ECE_BINS) -> float:
    """Top-label expected calibration error with equal-width bins on (0, 1]."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels).astype(np.intp).ravel()
    if probs.shape[0] == 0:
        raise DomainError("ece needs at least one prediction")
    if labels.shape[0] != probs.shape[0]:
        raise DomainError("probs and labels disagree on N")
    conf = probs.max(axis=1)
    pred = probs.argmax(axis=1)
    correct = (pred == labels).astype(np.float64)
    # Bin index for confidence in (0, 1]: bin b covers (b/n_bins, (b+1)/n_bins].
    idx = np.ceil(conf * n_bins).astype(np.intp) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    total = probs.shape[0]
    value = 0.0
    for b in range(n_bins):
        members = idx == b
        count = int(members.sum())
        if count == 0:
            continue
        acc = correct[members].mean()
        avg_conf = conf[members].mean()
        value += (count / total) * abs(acc - avg_conf)
    return float(value)


def crps_gaussian(mean, std, target) -> float:
    """Closed-form CRPS of N(mu, sigma^2): sigma [z(2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi)]."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if np.any(std < 0):
        raise DomainError("crps_gaussian needs nonnegative std")
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, (target - mean) / np.where(std > 0, std, 1.0), 0.0)
    crps = std * (z * (2.0 * norm.cdf(z) - 1.0) + 2.0 * norm.pdf(z) - 1.0 / math.sqrt(math.pi))
    # Degenerate sigma -> point mass: CRPS reduces to |y - mu|.
    crps = np.where(std > 0, crps, np.abs(target - mean))
    return float(np.mean(crps))
