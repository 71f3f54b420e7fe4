"""Adam-style adaptive gradient loop shared by MAP and FSP training."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError


@dataclass(frozen=True)
class AdamConfig:
    steps: int = 2000
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, cfg: dict) -> "AdamConfig":
        return cls(
            steps=int(cfg.get("steps", cls.steps)),
            lr=float(cfg.get("lr", cls.lr)),
            beta1=float(cfg.get("beta1", cls.beta1)),
            beta2=float(cfg.get("beta2", cls.beta2)),
            eps=float(cfg.get("eps", cls.eps)),
        )


def run_adam(value_and_grad, x0: np.ndarray, cfg: AdamConfig):
    """Minimize with Adam; returns (x_final, loss_trace).

    ``value_and_grad(x, step)`` supplies the (possibly stochastic) objective
    and its gradient. A non-finite loss halts with a NumericalError carrying
    the trace so far.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = []
    for step in range(1, cfg.steps + 1):
        loss, grad = value_and_grad(x, step)
        trace.append(float(loss))
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise NumericalError(
                f"training diverged at step {step} (loss={loss}); trace tail: "
                f"{[f'{t:.4g}' for t in trace[-5:]]}"
            )
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1**step)
        v_hat = v / (1.0 - cfg.beta2**step)
        x = x - cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return x, trace
