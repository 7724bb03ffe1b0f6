"""Minimal dense-array kernel with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for gradient
checking). Every differentiable op appends a node to the active GradTape;
backward() walks the tape in exact reverse execution order, so gradient
accumulation is deterministic for a fixed graph.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

# Coefficients of the tanh-approximation GELU:
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3)))
GELU_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC_COEF = 0.044715

NEG_INF = -np.inf

# When True, every op output is checked for NaN (inf is allowed: additive
# attention masks legitimately contain -inf). Enabled by the test suite.
_nan_checks = False


@contextmanager
def nan_checks():
    """Enable per-op NaN detection within a block."""
    global _nan_checks
    prev = _nan_checks
    _nan_checks = True
    try:
        yield
    finally:
        _nan_checks = prev


class NonFiniteError(FloatingPointError):
    """An op produced NaN values."""


def _check(out: np.ndarray, op: str) -> np.ndarray:
    if _nan_checks and np.isnan(out).any():
        raise NonFiniteError(f"op '{op}' produced NaN")
    return out


class GradTape:
    """Ordered record of executed ops.

    Nodes are appended in execution order; backward traverses the record
    strictly in reverse, which fixes the gradient accumulation order.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor"):
        self.nodes.append(node)

    def clear(self):
        self.nodes.clear()


_active_tape: GradTape | None = None


@contextmanager
def tape() -> GradTape:
    """Open a fresh tape; ops executed inside are recorded on it."""
    global _active_tape
    prev = _active_tape
    t = GradTape()
    _active_tape = t
    try:
        yield t
    finally:
        _active_tape = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
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
    """A dense array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward, op):
        out = Tensor.__new__(Tensor)
        out.data = _check(data, op)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        out._op = op
        if out.requires_grad and _active_tape is not None:
            out._parents = parents
            out._backward = backward
            _active_tape.record(out)
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    # -- elementwise ----------------------------------------------------------

    @staticmethod
    def _coerce(x, like: "Tensor") -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.dtype))

    def __add__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._from_op(a.data + b.data, (a, b), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other

        def backward(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")

    def __mul__(self, other):
        other = Tensor._coerce(other, self)
        a, b = self, other

        def backward(g):
            return (_unbroadcast(g * b.data, a.shape),
                    _unbroadcast(g * a.data, b.shape))

        return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")

    __rmul__ = __mul__

    def __neg__(self):
        a = self
        return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")

    # -- contractions ---------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        """Matrix product; supports stacked (batched) operands."""
        a, b = self, other
        if a.data.shape[-1] != b.data.shape[-2]:
            raise ValueError(
                f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")

        def backward(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")

    __matmul__ = matmul

    # -- nonlinearities -------------------------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        """Numerically stabilized softmax.

        Inputs may contain -inf (additive masking); a row of all -inf maps
        to all zeros by convention.
        """
        x = self.data
        if np.isnan(x).any():
            raise NonFiniteError("softmax received NaN input")
        m = np.max(x, axis=axis, keepdims=True)
        # Fully masked rows have m == -inf; shift by 0 there to avoid inf-inf.
        m = np.where(np.isfinite(m), m, 0.0)
        y = np.subtract(x, m)
        np.exp(y, out=y)
        denom = y.sum(axis=axis, keepdims=True)
        np.maximum(denom, np.finfo(x.dtype).tiny, out=denom)
        y /= denom
        a = self

        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            out = np.subtract(g, dot)
            out *= y
            return (out,)

        return Tensor._from_op(y, (a,), backward, "softmax")

    def layer_norm(self, gain: "Tensor", bias: "Tensor", eps: float = 1e-5) -> "Tensor":
        """Normalize over the last axis, then apply the affine (gain, bias)."""
        if eps <= 0:
            raise ValueError("layer_norm eps must be > 0")
        x = self.data
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gain.data + bias.data
        a, gn, bs = self, gain, bias
        n = x.shape[-1]

        def backward(g):
            gg = g * gn.data
            # d/dx of xhat with shared mean/variance terms
            t1 = gg
            t2 = gg.mean(axis=-1, keepdims=True)
            t3 = (gg * xhat).mean(axis=-1, keepdims=True) * xhat
            gx = inv * (t1 - t2 - t3)
            ggain = _unbroadcast(g * xhat, gn.shape)
            gbias = _unbroadcast(g, bs.shape)
            return gx.astype(x.dtype, copy=False), ggain, gbias

        return Tensor._from_op(out.astype(x.dtype, copy=False),
                               (a, gn, bs), backward, "layer_norm")

    def gelu(self) -> "Tensor":
        x = self.data
        x2 = x * x
        inner = x2 * GELU_CUBIC_COEF
        inner += 1.0
        inner *= x
        inner *= GELU_SQRT_2_OVER_PI
        t = np.tanh(inner)
        out = t + 1.0
        out *= x
        out *= 0.5
        a = self

        def backward(g):
            dinner = x2 * (3.0 * GELU_CUBIC_COEF)
            dinner += 1.0
            dinner *= GELU_SQRT_2_OVER_PI
            dx = 1.0 - t * t
            dx *= x
            dx *= dinner
            dx += 1.0 + t
            dx *= 0.5
            dx *= g
            return (dx,)

        return Tensor._from_op(out, (a,), backward, "gelu")

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        a = self
        return Tensor._from_op(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old = a.data.shape

        def backward(g):
            return (g.reshape(old),)

        return Tensor._from_op(a.data.reshape(shape), (a,), backward, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)

        def backward(g):
            return (g.transpose(inv),)

        return Tensor._from_op(a.data.transpose(axes), (a,), backward, "transpose")

    def __getitem__(self, idx) -> "Tensor":
        a = self

        def backward(g):
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)

        return Tensor._from_op(a.data[idx], (a,), backward, "slice")

    @staticmethod
    def concat(tensors: list, axis: int = 0) -> "Tensor":
        parts = [t.data for t in tensors]
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.split(g, splits, axis=axis))

        return Tensor._from_op(np.concatenate(parts, axis=axis),
                               tuple(tensors), backward, "concat")

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        a = self
        shape = a.data.shape

        def backward(g):
            if axis is None:
                return (np.full(shape, g, dtype=a.dtype),)
            gg = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(gg, shape).astype(a.dtype),)

        return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims),
                               (a,), backward, "sum")

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        a = self
        if axis is None:
            n = a.data.size
        else:
            n = a.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def backward(loss: Tensor, tape_obj: GradTape):
    """Accumulate gradients of `loss` into every reachable tensor on the tape.

    Traversal is in exact reverse execution order. Parameters that never
    entered the graph simply keep grad=None (treated as zero upstream).
    """
    if loss.data.shape != ():
        raise ValueError("backward expects a scalar loss")
    if loss._backward is None and loss not in tape_obj.nodes:
        raise ValueError("loss tensor is detached from the tape")
    loss.grad = np.ones_like(loss.data)
    handed_out = {id(loss.grad)}
    for node in reversed(tape_obj.nodes):
        if node.grad is None or node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                # own the array: copy views, read-only buffers, and arrays
                # already serving as another node's gradient
                if (g.base is not None or not g.flags.writeable
                        or id(g) in handed_out):
                    g = np.array(g)
                parent.grad = g
                handed_out.add(id(g))
            else:
                parent.grad += g


def zero_grads(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None
