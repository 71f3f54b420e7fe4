"""Hyperparameter calibration: grid search over tau, gradient method in log-space.

Both methods return a :class:`CalibResult` holding the best hyperparameters,
the full objective trace, and a method tag. The gradient method optimizes
log-hyperparameters (positivity without projection) with central-difference
gradients unless an analytic gradient is registered, and always returns the
best-seen iterate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CalibrationError, DomainError


@dataclass(frozen=True)
class GridSpec:
    """Log10-spaced grid for tau."""

    log10_lower: float = -5.0
    log10_upper: float = 5.0
    num: int = 41

    def __post_init__(self):
        if not self.log10_lower < self.log10_upper:
            raise DomainError("grid lower bound must be below upper bound")
        if self.num < 2:
            raise DomainError("grid needs at least 2 points")

    def values(self) -> np.ndarray:
        return 10.0 ** np.linspace(self.log10_lower, self.log10_upper, self.num)


@dataclass
class CalibResult:
    best: dict
    best_objective: float
    objective_name: str
    method: str  # "GS" | "GD"
    direction: str
    trace: list = field(default_factory=list)  # rows: (step, prior_prec, obs_noise, objective)
    halted: bool = False


def _better(candidate: float, incumbent: float, direction: str) -> bool:
    if direction == "max":
        return candidate > incumbent
    return candidate < incumbent


def grid_search(
    objective: Callable[[float], float],
    grid: GridSpec = GridSpec(),
    direction: str = "max",
    objective_name: str = "objective",
    obs_noise: float = 1.0,
) -> CalibResult:
    """Arg-best of ``objective(tau)`` over the grid; ties break toward smaller tau.

    Non-finite values are skipped with a warning; all-non-finite raises.
    """
    if direction not in ("max", "min"):
        raise DomainError(f"direction must be 'max' or 'min', got {direction!r}")
    trace = []
    best_tau = None
    best_val = None
    for step, tau in enumerate(np.sort(grid.values())):
        tau = float(tau)
        value = float(objective(tau))
        trace.append((step, tau, obs_noise, value))
        if not math.isfinite(value):
            warnings.warn(f"objective non-finite at tau={tau:g}; grid point skipped")
            continue
        if best_val is None or _better(value, best_val, direction):
            best_tau, best_val = tau, value
    if best_tau is None:
        raise CalibrationError("objective was non-finite on the entire grid")
    return CalibResult(
        best={"prior_prec": best_tau, "obs_noise": obs_noise},
        best_objective=best_val,
        objective_name=objective_name,
        method="GS",
        direction=direction,
        trace=trace,
    )


FD_STEP = 1e-4


def _fd_gradient(fn, x: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(x)
    for i in range(x.size):
        h = FD_STEP * (1.0 + abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (fn(xp) - fn(xm)) / (2.0 * h)
    return grad


def gradient_calibrate(
    objective: Callable[..., float],
    init: dict,
    steps: int = 200,
    lr: float = 0.1,
    direction: str = "max",
    grad_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    objective_name: str = "objective",
) -> CalibResult:
    """Fixed-step gradient ascent/descent on log-hyperparameters.

    ``init`` names the hyperparameters to optimize (e.g. {"prior_prec": 1.0,
    "obs_noise": 1.0}); ``objective`` receives the corresponding log-values
    as positional arguments. Gradients are central differences with
    h = 1e-4 (1 + |x|) unless ``grad_fn`` (on the log-vector) is given.
    Returns the best-seen iterate; a non-finite objective halts the run.
    """
    if direction not in ("max", "min"):
        raise DomainError(f"direction must be 'max' or 'min', got {direction!r}")
    names = list(init)
    x = np.array([math.log(float(init[k])) for k in names])

    def value_at(xv: np.ndarray) -> float:
        return float(objective(*xv))

    def as_hp(xv: np.ndarray) -> dict:
        hp = {name: math.exp(xv[i]) for i, name in enumerate(names)}
        hp.setdefault("obs_noise", 1.0)
        return hp

    current = value_at(x)
    if not math.isfinite(current):
        raise CalibrationError(f"objective not finite at init {as_hp(x)}")
    sign = 1.0 if direction == "max" else -1.0
    trace = [(0, as_hp(x)["prior_prec"], as_hp(x)["obs_noise"], current)]
    best_x, best_val = x.copy(), current
    halted = False
    for step in range(1, steps + 1):
        grad = grad_fn(x) if grad_fn is not None else _fd_gradient(value_at, x)
        if not np.all(np.isfinite(grad)):
            halted = True
            break
        x = x + sign * lr * grad
        current = value_at(x)
        trace.append((step, as_hp(x)["prior_prec"], as_hp(x)["obs_noise"], current))
        if not math.isfinite(current):
            halted = True
            break
        if _better(current, best_val, direction):
            best_x, best_val = x.copy(), current
    return CalibResult(
        best=as_hp(best_x),
        best_objective=best_val,
        objective_name=objective_name,
        method="GD",
        direction=direction,
        trace=trace,
        halted=halted,
    )
