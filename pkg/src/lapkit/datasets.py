"""Synthetic desk-scale tasks: gappy sine regression and two-moons."""

from __future__ import annotations

import numpy as np

from .errors import DomainError
from .nets import Batch

TASKS = ("sine_regression", "moons_classification")

SINE_CLUSTERS = ((-1.0, -0.25), (0.25, 1.0))


def gen_data(task: str, n: int, noise: float, seed: int, clusters=SINE_CLUSTERS) -> Batch:
    """Seeded draw of a task dataset.

    sine_regression: x uniform over two disjoint intervals (a gap keeps an
    in-between region unobserved), y = sin(2 pi x) + noise * N(0,1).
    moons_classification: two interleaving half-circles with labels 0/1 and
    isotropic Gaussian jitter of scale ``noise``.
    """
    if n < 1:
        raise DomainError(f"need n >= 1 data points, got {n}")
    rng = np.random.default_rng(seed)
    if task == "sine_regression":
        widths = np.array([hi - lo for lo, hi in clusters], dtype=np.float64)
        if np.any(widths <= 0):
            raise DomainError(f"invalid sine clusters {clusters!r}")
        pick = rng.choice(len(clusters), size=n, p=widths / widths.sum())
        u = rng.uniform(size=n)
        x = np.array([clusters[c][0] + u[i] * widths[c] for i, c in enumerate(pick)])
        y = np.sin(2.0 * np.pi * x) + noise * rng.standard_normal(n)
        return Batch(x[:, None], y[:, None])
    if task == "moons_classification":
        n_outer = n // 2
        n_inner = n - n_outer
        t_outer = rng.uniform(0.0, np.pi, n_outer)
        t_inner = rng.uniform(0.0, np.pi, n_inner)
        outer = np.column_stack([np.cos(t_outer), np.sin(t_outer)])
        inner = np.column_stack([1.0 - np.cos(t_inner), 0.5 - np.sin(t_inner)])
        x = np.vstack([outer, inner]) + noise * rng.standard_normal((n, 2))
        labels = np.concatenate([np.zeros(n_outer, dtype=np.intp), np.ones(n_inner, dtype=np.intp)])
        order = rng.permutation(n)
        return Batch(x[order], labels[order])
    raise DomainError(f"unknown task {task!r}, expected one of {TASKS}")


def data_rows(task: str, batch: Batch):
    """(header, rows) for the task's CSV schema."""
    if task == "sine_regression":
        header = ["x", "y"]
        rows = [[float(a), float(b)] for a, b in zip(batch.inputs[:, 0], batch.targets[:, 0])]
    else:
        header = ["x1", "x2", "label"]
        rows = [
            [float(a), float(b), int(c)]
            for (a, b), c in zip(batch.inputs, batch.targets)
        ]
    return header, rows
