"""Central finite-difference gradient checking for tiny configurations.

``central_difference`` perturbs every entry of every tensor, so it is only
meant for the small gradient-check configs. The float32 production path is
checked against a float64 FD oracle (raw float32 differences are dominated
by cancellation noise); the float64 path is checked against itself at a
tighter tolerance.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def to_dtype(params: dict[str, np.ndarray], dtype) -> dict[str, np.ndarray]:
    return {k: v.astype(dtype) for k, v in params.items()}


def central_difference(
    loss_fn: Callable[[dict[str, np.ndarray]], float],
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    only: list[str] | None = None,
) -> dict[str, np.ndarray]:
    """FD gradient (loss(p+h) - loss(p-h)) / 2h for every entry."""
    work = {k: v.copy() for k, v in params.items()}
    out: dict[str, np.ndarray] = {}
    names = only if only is not None else sorted(work)
    for name in names:
        tensor = work[name]
        grad = np.zeros_like(tensor, dtype=np.float64)
        flat = tensor.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss_fn(work)
            flat[i] = orig - h
            lm = loss_fn(work)
            flat[i] = orig
            gflat[i] = (lp - lm) / (2.0 * h)
        out[name] = grad
    return out


def relative_error(analytic: np.ndarray, fd: np.ndarray) -> float:
    """Norm-based relative error: ||a - f|| / max(||a||, ||f||, tiny)."""
    a = analytic.astype(np.float64).reshape(-1)
    f = fd.astype(np.float64).reshape(-1)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(f)), 1e-12)
    return float(np.linalg.norm(a - f)) / denom


def max_relative_error(
    analytic: dict[str, np.ndarray], fd: dict[str, np.ndarray]
) -> tuple[float, dict[str, float]]:
    per_tensor = {name: relative_error(analytic[name], fd[name]) for name in fd}
    worst = max(per_tensor.values()) if per_tensor else 0.0
    return worst, per_tensor
