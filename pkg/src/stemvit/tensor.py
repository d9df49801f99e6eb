"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

The graph is define-by-run: while a Tape is active, every operation on a
tracked tensor appends a node (inputs, output, backward closure) to it.
Calling ``backward`` on a scalar loss walks the tape in reverse and
accumulates ``.grad`` arrays on every tensor that participated.
"""

from __future__ import annotations

import numpy as np
from scipy import special


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes = []  # (output Tensor, inputs tuple, backward closure)

    def record(self, out, inputs, backward):
        out._on_tape = True
        self.nodes.append((out, inputs, backward))

    def __enter__(self):
        _push_tape(self)
        return self

    def __exit__(self, *exc):
        _pop_tape(self)
        return False


_TAPE_STACK = []


def _push_tape(tape):
    _TAPE_STACK.append(tape)


def _pop_tape(tape):
    assert _TAPE_STACK and _TAPE_STACK[-1] is tape
    _TAPE_STACK.pop()


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """n-d float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_on_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        if self.data.size == 0:
            raise ShapeError("empty tensor (all extents must be positive)")
        self.grad = None
        self.requires_grad = requires_grad
        self._on_tape = False

    # -- basic protocol ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _tracked(self):
        return self.requires_grad or self._on_tape

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- arithmetic --------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    # -- conveniences ------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce_max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def detach(self):
        return Tensor(self.data.copy())


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, backward):
    """Build the output tensor and, if a tape is live, record the op."""
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t._tracked() for t in inputs):
        tape.record(out, tuple(inputs), backward)
    return out


def record_op(out_data, inputs, backward):
    """Public hook for composite primitives (conv2d lives in layers)."""
    return _record(out_data, inputs, backward)


# -- elementwise -----------------------------------------------------------


def _check_broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast")


def add(a, b):
    _check_broadcast(a, b)

    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g, a.shape))
        if b._tracked():
            b._accum(_unbroadcast(g, b.shape))

    return _record(a.data + b.data, (a, b), backward)


def sub(a, b):
    _check_broadcast(a, b)

    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g, a.shape))
        if b._tracked():
            b._accum(_unbroadcast(-g, b.shape))

    return _record(a.data - b.data, (a, b), backward)


def mul(a, b):
    _check_broadcast(a, b)

    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b._tracked():
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _record(a.data * b.data, (a, b), backward)


def div(a, b):
    _check_broadcast(a, b)

    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b._tracked():
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(a.data / b.data, (a, b), backward)


def maximum(a, b):
    """Elementwise max; subgradient 0 on ties (the ReLU kink convention)."""
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b)

    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g * (a.data > b.data), a.shape))
        if b._tracked():
            b._accum(_unbroadcast(g * (b.data > a.data), b.shape))

    return _record(np.maximum(a.data, b.data), (a, b), backward)


def exp(a):
    out_data = np.exp(a.data)

    def backward(g):
        if a._tracked():
            a._accum(g * out_data)

    return _record(out_data, (a,), backward)


def log(a):
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")

    def backward(g):
        if a._tracked():
            a._accum(g / a.data)

    return _record(np.log(a.data), (a,), backward)


def sqrt(a):
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    out_data = np.sqrt(a.data)

    def backward(g):
        if a._tracked():
            a._accum(g * 0.5 / out_data)

    return _record(out_data, (a,), backward)


def erf(a):
    def backward(g):
        if a._tracked():
            a._accum(g * (2.0 / np.sqrt(np.pi)) * np.exp(-a.data * a.data))

    return _record(special.erf(a.data), (a,), backward)


# -- reductions ------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axis)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
    return axes


def reduce_sum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if a._tracked():
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accum(np.broadcast_to(g, a.shape).copy())

    return _record(out_data, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = np.prod([a.shape[ax] for ax in axes])
    out_data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if a._tracked():
            if not keepdims:
                g = np.expand_dims(g, axes)
            a._accum(np.broadcast_to(g / count, a.shape).copy())

    return _record(out_data, (a,), backward)


def reduce_max(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out_data = a.data.max(axis=axes, keepdims=keepdims)

    def backward(g):
        if a._tracked():
            kept = a.data.max(axis=axes, keepdims=True)
            mask = (a.data == kept).astype(np.float64)
            mask /= mask.sum(axis=axes, keepdims=True)
            gk = g if keepdims else np.expand_dims(g, axes)
            a._accum(mask * gk)

    return _record(out_data, (a,), backward)


# -- linear algebra / structure ---------------------------------------------


def matmul(a, b):
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a._tracked():
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accum(_unbroadcast(ga, a.shape))
        if b._tracked():
            if a.ndim > 1:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            else:
                gb = np.multiply.outer(a.data, g)
            b._accum(_unbroadcast(gb, b.shape))

    return _record(out_data, (a, b), backward)


def reshape(a, shape):
    out_data = a.data.reshape(shape)

    def backward(g):
        if a._tracked():
            a._accum(g.reshape(a.shape))

    return _record(out_data, (a,), backward)


def transpose(a, axes):
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g):
        if a._tracked():
            a._accum(g.transpose(inv))

    return _record(a.data.transpose(axes), (a,), backward)


def broadcast_to(a, shape):
    def backward(g):
        if a._tracked():
            a._accum(_unbroadcast(g, a.shape))

    return _record(np.broadcast_to(a.data, shape).copy(), (a,), backward)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            if t._tracked():
                t._accum(piece)

    return _record(out_data, tuple(tensors), backward)


def take(a, idx):
    """Basic slicing/indexing with scatter-add backward."""
    out_data = np.array(a.data[idx])  # copy: no mutable views

    def backward(g):
        if a._tracked():
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            a._accum(full)

    return _record(out_data, (a,), backward)


# -- driver ------------------------------------------------------------------


def backward(tape, loss):
    """Reverse sweep: populate grads of everything reachable from ``loss``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, _inputs, bw in reversed(tape.nodes):
        if out.grad is not None:
            bw(out.grad)


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at numpy array ``x``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad
