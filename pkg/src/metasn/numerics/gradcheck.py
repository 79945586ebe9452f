"""Central finite-difference gradients, used as an oracle for autodiff."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np


def finite_diff_gradient(
    f: Callable[[dict[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    step: float = 1e-4,
) -> dict[str, np.ndarray]:
    """Estimate df/dp by (f(p + h e) - f(p - h e)) / 2h, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f(work)
            flat[i] = orig - step
            down = f(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
        grads[name] = g
    return grads


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max|a - b| scaled by the larger of the two max magnitudes.

    ``floor`` keeps an exactly-zero group (e.g. a dead ReLU map) from turning
    finite-difference round-off, around 1e-11 at step 1e-4, into a 100% error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)
