"""Minimal dense-tensor engine with reverse-mode autodiff.

Design:
  * float64 everywhere; every freshly created value is checked finite
    (NaN/Inf raises immediately instead of propagating silently).
  * define-by-run tape: each op closes over its inputs and records a
    backward closure; ``Tensor.backward`` walks the graph in reverse
    topological order and accumulates gradients additively across
    fan-out.
  * tensors participating in a graph are never mutated in place.

Hot kernels (conv2d, bilinear upsampling) dispatch through
:mod:`dconn.kernels`; everything else is plain numpy.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels


class NonFiniteError(ArithmeticError):
    """A tensor value became NaN or infinite."""


class GraphError(RuntimeError):
    """Illegal use of the autodiff graph (e.g. backward called twice)."""


class Tensor:
    """Dense float64 array plus optional gradient and tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._done = False

    # -- construction -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"], backward: Callable[[], None]) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic protocol ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff -------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad.

        Only valid on scalar outputs, once per executed graph.
        """
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar, got shape {self.data.shape}")
        if self._done:
            raise GraphError("backward already called on this graph; re-execute the ops first")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                if node._done:
                    raise GraphError("graph node already consumed by a previous backward")
                node._backward()
                node._done = True
        # leaves keep _done False so they can join fresh graphs

    def accum_grad(self, g: np.ndarray) -> None:
        # rebinding (never in-place) keeps aliased buffers safe
        self.grad = g if self.grad is None else self.grad + g

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward():
        if a.requires_grad:
            a.accum_grad(_unbroadcast(out.grad, a.data.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(out.grad, b.data.shape))

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward():
        if a.requires_grad:
            a.accum_grad(_unbroadcast(out.grad * b.data, a.data.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(out.grad * a.data, b.data.shape))

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward():
        if a.requires_grad:
            a.accum_grad(_unbroadcast(out.grad / b.data, a.data.shape))
        if b.requires_grad:
            b.accum_grad(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward():
        if a.requires_grad:
            a.accum_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accum_grad(a.data.T @ out.grad)

    out = Tensor._from_op(out_data, (a, b), backward)
    return out


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got {a.shape}")

    def backward():
        a.accum_grad(out.grad.T)

    out = Tensor._from_op(a.data.T.copy(), (a,), backward)
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def backward():
        a.accum_grad(out.grad.reshape(old))

    out = Tensor._from_op(a.data.reshape(shape), (a,), backward)
    return out


# -- reductions -------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accum_grad(np.broadcast_to(g, a.data.shape).copy())

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def amax(a, axis: int) -> Tensor:
    """Max along one axis; gradient routes to the first argmax (ties)."""
    a = as_tensor(a)
    idx = np.argmax(a.data, axis=axis)
    out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward():
        g = np.zeros_like(a.data)
        np.put_along_axis(g, np.expand_dims(idx, axis), np.expand_dims(out.grad, axis), axis=axis)
        a.accum_grad(g)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


# -- elementwise nonlinearities ---------------------------------------------


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward():
        # subgradient at 0 is defined as 0
        a.accum_grad(out.grad * (a.data > 0.0))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward():
        a.accum_grad(out.grad * out_data * (1.0 - out_data))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def tlog(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward():
        a.accum_grad(out.grad / a.data)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def tabs(a) -> Tensor:
    a = as_tensor(a)

    def backward():
        a.accum_grad(out.grad * np.sign(a.data))

    out = Tensor._from_op(np.abs(a.data), (a,), backward)
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only strictly inside (lo, hi)."""
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward():
        a.accum_grad(out.grad * ((a.data > lo) & (a.data < hi)))

    out = Tensor._from_op(out_data, (a,), backward)
    return out


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward():
        g = out.grad
        dot = (g * s).sum(axis=axis, keepdims=True)
        a.accum_grad(s * (g - dot))

    out = Tensor._from_op(s, (a,), backward)
    return out


# -- structural ops ----------------------------------------------------------


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward():
        g = np.zeros_like(a.data)
        g[sl] = out.grad
        a.accum_grad(g)

    out = Tensor._from_op(a.data[sl], (a,), backward)
    return out


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = [p.data.shape[axis] for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + widths)

    def backward():
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                sl = [slice(None)] * out_data.ndim
                sl[axis] = slice(lo, hi)
                p.accum_grad(out.grad[tuple(sl)])

    out = Tensor._from_op(out_data, tuple(parts), backward)
    return out


def channel_split(a, parts: int, axis: int = 1) -> list[Tensor]:
    a = as_tensor(a)
    c = a.data.shape[axis]
    if c % parts:
        raise ValueError(f"axis {axis} of size {c} not divisible into {parts} parts")
    w = c // parts
    return [slice_axis(a, axis, i * w, (i + 1) * w) for i in range(parts)]


def _shift_slices(shape, dy: int, dx: int):
    h, w = shape[-2], shape[-1]
    if abs(dy) >= h or abs(dx) >= w:
        return None, None
    src_r = slice(max(dy, 0), h + min(dy, 0))
    dst_r = slice(max(-dy, 0), h + min(-dy, 0))
    src_c = slice(max(dx, 0), w + min(dx, 0))
    dst_c = slice(max(-dx, 0), w + min(-dx, 0))
    lead = (slice(None),) * (len(shape) - 2)
    return lead + (dst_r, dst_c), lead + (src_r, src_c)


def shift2d(a, dy: int, dx: int) -> Tensor:
    """out[.., r, c] = a[.., r+dy, c+dx], zero where out of bounds."""
    a = as_tensor(a)
    out_data = np.zeros_like(a.data)
    dst, src = _shift_slices(a.data.shape, dy, dx)
    if dst is not None:
        out_data[dst] = a.data[src]

    def backward():
        g = np.zeros_like(a.data)
        if dst is not None:
            g[src] = out.grad[dst]
        a.accum_grad(g)

    out = Tensor._from_op(out_data, (a,), backward)
    return out


# -- network primitives -------------------------------------------------------


def conv2d(x, w, b, stride: int = 1) -> Tensor:
    """Cross-correlation, NCHW, 'same' padding (k in {1, 3}), stride 1 or 2."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input/kernel, got {x.shape} / {w.shape}")
    if w.shape[2] not in (1, 3) or w.shape[3] not in (1, 3) or w.shape[2] != w.shape[3]:
        raise ValueError(f"conv2d supports square 1x1 or 3x3 kernels, got {w.shape[2]}x{w.shape[3]}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d stride must be 1 or 2, got {stride}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if b.shape != (w.shape[0],):
        raise ValueError(f"conv2d bias shape {b.shape} does not match {w.shape[0]} filters")
    out_data = kernels.conv2d_forward(x.data, w.data, b.data, stride)

    def backward():
        if x.requires_grad:
            x.accum_grad(kernels.conv2d_backward_input(w.data, out.grad, x.data.shape, stride))
        if w.requires_grad:
            w.accum_grad(kernels.conv2d_backward_kernel(x.data, out.grad, w.data.shape, stride))
        if b.requires_grad:
            b.accum_grad(out.grad.sum(axis=(0, 2, 3)))

    out = Tensor._from_op(out_data, (x, w, b), backward)
    return out


def upsample_bilinear(x, factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor (align_corners=False)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"upsample expects a 4-D tensor, got {x.shape}")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    in_h, in_w = x.shape[2], x.shape[3]
    out_data = kernels.upsample_forward(x.data, factor)

    def backward():
        x.accum_grad(kernels.upsample_backward(out.grad, factor, in_h, in_w))

    out = Tensor._from_op(out_data, (x,), backward)
    return out


def gap(x) -> Tensor:
    """Global average pooling: [N, C, H, W] -> [N, C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"gap expects a 4-D tensor, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out_data = x.data.mean(axis=(2, 3))

    def backward():
        x.accum_grad(np.broadcast_to(out.grad[:, :, None, None] / hw, x.data.shape).copy())

    out = Tensor._from_op(out_data, (x,), backward)
    return out
