"""Small shared linear-algebra helpers (jittered Cholesky)."""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import NumericalError

# Jitter schedule shared by posterior precision, kernel gram matrices, and
# predictive covariance draws: relative to mean(diag), escalating tenfold.
JITTER_START = 1e-10
JITTER_MAX = 1e-6


def chol_psd(matrix: np.ndarray, name: str = "matrix") -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of a PSD-up-to-roundoff matrix.

    Retries with +jitter*mean(diag)*I from 1e-10 up to 1e-6 (x10 steps).
    Returns (L, jitter_used). Raises NumericalError when even the largest
    jitter fails, reporting the offending leading minor and smallest pivot.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        return np.zeros_like(matrix), 0.0
    base = float(np.mean(np.diag(matrix)))
    last_err = None
    for jitter in [0.0] + [JITTER_START * 10**k for k in range(8) if JITTER_START * 10**k <= JITTER_MAX]:
        try:
            shifted = matrix if jitter == 0.0 else matrix + (jitter * base) * np.eye(matrix.shape[0])
            return scipy.linalg.cholesky(shifted, lower=True), jitter * base
        except scipy.linalg.LinAlgError as err:
            last_err = err
    pivot = float(np.min(np.linalg.eigvalsh(matrix)))
    raise NumericalError(
        f"Cholesky of {name} failed after jitter {JITTER_MAX:.0e}*mean(diag); "
        f"smallest pivot ~ {pivot:.3e} ({last_err})"
    )
