"""Shared numeric helpers for the test suite."""

import numpy as np


def numeric_grad(fn, tensor, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``tensor.data``.

    The tensor's (read-only) buffer is swapped for a writable copy while
    probing and restored afterwards.
    """
    original = tensor.data
    arr = np.array(original, dtype=np.float64)
    tensor.data = arr
    g = np.zeros_like(arr)
    try:
        for i in np.ndindex(arr.shape):
            old = arr[i]
            arr[i] = old + eps
            hi = fn()
            arr[i] = old - eps
            lo = fn()
            arr[i] = old
            g[i] = (hi - lo) / (2 * eps)
    finally:
        tensor.data = original
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)
