"""Numba @njit implementations of the hot kernels.

Loop nests are ordered so accumulation per output element happens in a
fixed order (deterministic run to run) and the innermost loop runs over
independent elements, which LLVM can vectorize without fastmath
reassociation. fastmath stays off: bit-stable results matter more here
than the last bit of throughput.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ._kernels_numpy import bilinear_matrix  # noqa: F401  (shared index math lives there)

_OPTS = dict(cache=True, nogil=True)


@njit(**_OPTS)
def _conv2d_forward(xp, w, b, stride, oh, ow):
    n, cin = xp.shape[0], xp.shape[1]
    k, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    y = np.empty((n, k, oh, ow), dtype=np.float64)
    for ni in range(n):
        for ki in range(k):
            for o1 in range(oh):
                for o2 in range(ow):
                    y[ni, ki, o1, o2] = b[ki]
            for ci in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[ki, ci, i, j]
                        for o1 in range(oh):
                            for o2 in range(ow):
                                y[ni, ki, o1, o2] += wv * xp[ni, ci, o1 * stride + i, o2 * stride + j]
    return y


@njit(**_OPTS)
def _conv2d_backward_input(w, gy, gxp, stride):
    n, k, oh, ow = gy.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for ni in range(n):
        for ki in range(k):
            for ci in range(cin):
                for i in range(kh):
                    for j in range(kw):
                        wv = w[ki, ci, i, j]
                        for o1 in range(oh):
                            for o2 in range(ow):
                                gxp[ni, ci, o1 * stride + i, o2 * stride + j] += wv * gy[ni, ki, o1, o2]


@njit(**_OPTS)
def _conv2d_backward_kernel(xp, gy, gw, stride):
    n, k, oh, ow = gy.shape
    cin, kh, kw = gw.shape[1], gw.shape[2], gw.shape[3]
    for ki in range(k):
        for ci in range(cin):
            for i in range(kh):
                for j in range(kw):
                    acc = 0.0
                    for ni in range(n):
                        for o1 in range(oh):
                            for o2 in range(ow):
                                acc += gy[ni, ki, o1, o2] * xp[ni, ci, o1 * stride + i, o2 * stride + j]
                    gw[ki, ci, i, j] = acc


@njit(**_OPTS)
def _upsample_forward(x, i0, i1, ty, j0, j1, tx):
    n, c, oh, ow = x.shape[0], x.shape[1], i0.shape[0], j0.shape[0]
    y = np.empty((n, c, oh, ow), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for o1 in range(oh):
                a, bq, t = i0[o1], i1[o1], ty[o1]
                for o2 in range(ow):
                    top = (1.0 - tx[o2]) * x[ni, ci, a, j0[o2]] + tx[o2] * x[ni, ci, a, j1[o2]]
                    bot = (1.0 - tx[o2]) * x[ni, ci, bq, j0[o2]] + tx[o2] * x[ni, ci, bq, j1[o2]]
                    y[ni, ci, o1, o2] = (1.0 - t) * top + t * bot
    return y


@njit(**_OPTS)
def _upsample_backward(gy, i0, i1, ty, j0, j1, tx, in_h, in_w):
    n, c, oh, ow = gy.shape
    gx = np.zeros((n, c, in_h, in_w), dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            for o1 in range(oh):
                a, bq, t = i0[o1], i1[o1], ty[o1]
                for o2 in range(ow):
                    g = gy[ni, ci, o1, o2]
                    gx[ni, ci, a, j0[o2]] += (1.0 - t) * (1.0 - tx[o2]) * g
                    gx[ni, ci, a, j1[o2]] += (1.0 - t) * tx[o2] * g
                    gx[ni, ci, bq, j0[o2]] += t * (1.0 - tx[o2]) * g
                    gx[ni, ci, bq, j1[o2]] += t * tx[o2] * g
    return gx


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad:
        return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    return np.ascontiguousarray(x)


def _lerp_index(in_size: int, factor: int):
    o = np.arange(in_size * factor, dtype=np.float64)
    src = (o + 0.5) / factor - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    lo = np.clip(i0, 0, in_size - 1)
    hi = np.clip(i0 + 1, 0, in_size - 1)
    return lo, hi, t


def conv2d_forward(x, w, b, stride):
    kh = w.shape[2]
    pad = (kh - 1) // 2
    oh = (x.shape[2] + 2 * pad - kh) // stride + 1
    ow = (x.shape[3] + 2 * pad - w.shape[3]) // stride + 1
    return _conv2d_forward(_pad(x, pad), np.ascontiguousarray(w), np.ascontiguousarray(b), stride, oh, ow)


def conv2d_backward_input(w, gy, x_shape, stride):
    pad = (w.shape[2] - 1) // 2
    n, c, h, wd = x_shape
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    _conv2d_backward_input(np.ascontiguousarray(w), np.ascontiguousarray(gy), gxp, stride)
    if pad:
        return gxp[:, :, pad:-pad, pad:-pad].copy()
    return gxp


def conv2d_backward_kernel(x, gy, k_shape, stride):
    pad = (k_shape[2] - 1) // 2
    gw = np.zeros(k_shape)
    _conv2d_backward_kernel(_pad(x, pad), np.ascontiguousarray(gy), gw, stride)
    return gw


def upsample_forward(x, factor):
    if factor == 1:
        return x.copy()
    i0, i1, ty = _lerp_index(x.shape[2], factor)
    j0, j1, tx = _lerp_index(x.shape[3], factor)
    return _upsample_forward(np.ascontiguousarray(x), i0, i1, ty, j0, j1, tx)


def upsample_backward(gy, factor, in_h, in_w):
    if factor == 1:
        return gy.copy()
    i0, i1, ty = _lerp_index(in_h, factor)
    j0, j1, tx = _lerp_index(in_w, factor)
    return _upsample_backward(np.ascontiguousarray(gy), i0, i1, ty, j0, j1, tx, in_h, in_w)
