"""Gaussian-process priors: stationary kernels and gram matrices.

Multi-output models use independent GP priors per output channel sharing
one kernel (no cross-output correlations).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DomainError

KERNELS = ("matern52", "periodic", "rbf")


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    variance: float = 1.0
    lengthscale: float = 1.0
    period: Optional[float] = None

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise DomainError(f"unknown kernel {self.kind!r}, expected one of {KERNELS}")
        if not (self.variance > 0 and self.lengthscale > 0):
            raise DomainError("kernel variance and lengthscale must be positive")
        if self.kind == "periodic":
            if self.period is None or not self.period > 0:
                raise DomainError("periodic kernel needs a positive period")

    @classmethod
    def from_dict(cls, cfg: dict) -> "KernelSpec":
        return cls(
            kind=cfg["kind"],
            variance=float(cfg.get("variance", 1.0)),
            lengthscale=float(cfg.get("lengthscale", 1.0)),
            period=float(cfg["period"]) if cfg.get("period") is not None else None,
        )


def kernel_matrix(spec: KernelSpec, x, x2=None) -> np.ndarray:
    """Gram matrix k(X, X') on euclidean distances."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x2 = x if x2 is None else np.atleast_2d(np.asarray(x2, dtype=np.float64))
    r = cdist(x, x2)
    s2, ell = spec.variance, spec.lengthscale
    if spec.kind == "matern52":
        a = np.sqrt(5.0) * r / ell
        return s2 * (1.0 + a + a * a / 3.0) * np.exp(-a)
    if spec.kind == "periodic":
        return s2 * np.exp(-2.0 * np.sin(np.pi * r / spec.period) ** 2 / ell**2)
    return s2 * np.exp(-(r * r) / (2.0 * ell**2))


@dataclass(frozen=True)
class GPPrior:
    """Kernel plus a mean function (default zero), applied per output channel."""

    kernel: KernelSpec
    mean_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def mean(self, x, out_dim: int) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.mean_fn is None:
            return np.zeros((x.shape[0], out_dim))
        m = np.asarray(self.mean_fn(x), dtype=np.float64)
        if m.ndim == 1:
            m = np.repeat(m[:, None], out_dim, axis=1)
        return m
