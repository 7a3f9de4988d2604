"""Pure-numpy im2col / col2im for 3D convolution (fallback backend).

Grids are channels-last, (N, D, H, W, C).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col3d(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """Gather conv patches.

    Args:
        x: input of shape (N, D, H, W, C).

    Returns:
        Contiguous array of shape (N, oD, oH, oW, k**3 * C); the last axis is
        ordered (kd, kh, kw, channel).
    """
    n, d, h, w, c = x.shape
    od, oh, ow = (out_extent(s, k, stride, pad) for s in (d, h, w))
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k, k), axis=(1, 2, 3))
    win = win[:, : (od - 1) * stride + 1 : stride, : (oh - 1) * stride + 1 : stride,
              : (ow - 1) * stride + 1 : stride]
    # (N, oD, oH, oW, C, k, k, k) -> (N, oD, oH, oW, k, k, k, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 3, 5, 6, 7, 4)).reshape(
        n, od, oh, ow, k * k * k * c)


def col2im3d(cols: np.ndarray, x_shape: tuple, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add patches back onto an (N, D, H, W, C) grid; adjoint of im2col3d."""
    n, d, h, w, c = x_shape
    od, oh, ow = (out_extent(s, k, stride, pad) for s in (d, h, w))
    cols = cols.reshape(n, od, oh, ow, k, k, k, c)
    out = np.zeros((n, d + 2 * pad, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    for a in range(k):
        ea = a + stride * (od - 1) + 1
        for b in range(k):
            eb = b + stride * (oh - 1) + 1
            for e in range(k):
                ee = e + stride * (ow - 1) + 1
                out[:, a:ea:stride, b:eb:stride, e:ee:stride] += cols[:, :, :, :, a, b, e]
    if pad:
        out = out[:, pad:pad + d, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)
