"""Pure-numpy implementations of the hot kernels.

Convolution uses sliding windows + tensordot (one BLAS gemm per call);
bilinear resampling is expressed as two small interpolation matrices so
forward and backward are plain matmuls. These are the reference
implementations; the numba versions in ``_kernels_numba`` must agree to
tight tolerance (see tests).

Conventions shared by both backends:
  * conv2d is cross-correlation, NCHW layout, kernel KCkhkw, "same"
    padding pad = (k - 1) // 2, stride 1 or 2, float64.
  * bilinear resize uses the align_corners=False source mapping
    src = (dst + 0.5) / factor - 0.5 with edge clamping.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(size: int, k: int, pad: int, stride: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    kh, kw = w.shape[2], w.shape[3]
    pad = (kh - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: [N, C, OH, OW, kh, kw]; contract (C, kh, kw) against w [K, C, kh, kw]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    y = np.moveaxis(y, 3, 1)
    return np.ascontiguousarray(y) + b[None, :, None, None]


def conv2d_backward_input(w: np.ndarray, gy: np.ndarray, x_shape: tuple, stride: int) -> np.ndarray:
    n, c, h, wd = x_shape
    k, _, kh, kw = w.shape
    pad = (kh - 1) // 2
    oh, ow = gy.shape[2], gy.shape[3]
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            # output (oh, ow) read xp[oh*stride + i, ow*stride + j]
            g = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # [N, OH, OW, C]
            gxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += np.moveaxis(g, 3, 1)
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad].copy()
    return gxp


def conv2d_backward_kernel(x: np.ndarray, gy: np.ndarray, k_shape: tuple, stride: int) -> np.ndarray:
    kh, kw = k_shape[2], k_shape[3]
    pad = (kh - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # gy [N, K, OH, OW] x win [N, C, OH, OW, kh, kw] -> [K, C, kh, kw]
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))


def bilinear_matrix(in_size: int, factor: int) -> np.ndarray:
    """Row-stochastic [factor*in_size, in_size] interpolation matrix."""
    out_size = in_size * factor
    a = np.zeros((out_size, in_size))
    for o in range(out_size):
        src = (o + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        lo = min(max(i0, 0), in_size - 1)
        hi = min(max(i0 + 1, 0), in_size - 1)
        a[o, lo] += 1.0 - t
        a[o, hi] += t
    return a


def upsample_forward(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x.copy()
    ah = bilinear_matrix(x.shape[2], factor)
    aw = bilinear_matrix(x.shape[3], factor)
    return ah[None, None] @ x @ aw.T[None, None]


def upsample_backward(gy: np.ndarray, factor: int, in_h: int, in_w: int) -> np.ndarray:
    if factor == 1:
        return gy.copy()
    ah = bilinear_matrix(in_h, factor)
    aw = bilinear_matrix(in_w, factor)
    return ah.T[None, None] @ gy @ aw[None, None]
