"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy float64 array. Operations executed while a Tape is
active are recorded as nodes in execution order, which is automatically a
topological order of the computation graph. ``Tape.backward`` runs a single
reverse sweep over the recorded nodes and accumulates gradients on every
leaf tensor created with ``requires_grad=True``.

Scope is deliberately narrow: the primitives below are exactly what small
MLPs, a one-layer attention decoder, and a bidirectional RNN need.
Broadcasting is restricted to leading-batch, trailing-bias and per-row
scale patterns; anything else must be written out explicitly.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "NumericError",
    "tape",
    "backward",
    "constant",
    "parameter",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "transpose_last2",
    "tanh",
    "sigmoid",
    "leaky_relu",
    "exp",
    "log",
    "softmax",
    "log_sum_exp",
    "reduce_sum",
    "reduce_mean",
    "concat_last",
    "embedding",
    "gather_last",
    "add_bias",
    "add_row_bias",
    "scale_rows",
    "layer_norm",
    "clamp",
    "clamp_min",
]

FINITE_CHECKS = True


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""


class NumericError(ArithmeticError):
    """Raised when a forward or backward pass produces NaN or Inf."""


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    # ascontiguousarray promotes 0-d to 1-d, so guard scalars
    if arr.ndim == 0:
        return arr
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense float64 value, optionally tracked for gradients.

    ``grad`` is populated (and accumulated across repeated backward calls)
    only on leaf tensors with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: "_Node" | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are promoted to constants
    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _coerce(other))


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


class _Node:
    __slots__ = ("op", "out", "parents", "backward_fn")

    def __init__(self, op: str, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable):
        self.op = op
        self.out = out
        self.parents = tuple(parents)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Nodes are appended in execution order, so every node's parents precede
    it. Tapes are not thread safe; use one tape per thread.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor) -> None:
        """Accumulate d(root)/d(leaf) into every requires_grad leaf."""
        if root.data.ndim != 0:
            raise ShapeError(
                f"backward root must be scalar, got shape {root.data.shape}"
            )
        if root._node is None or root._node not in _node_set(self):
            # root must have been produced on this tape
            if root._node is None:
                raise ValueError("backward root was not recorded on any tape")
        grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
        seen_root = False
        for node in reversed(self.nodes):
            if node.out is root:
                seen_root = True
            if not seen_root:
                continue
            g_out = grads.pop(id(node.out), None)
            if g_out is None:
                continue
            parent_grads = node.backward_fn(g_out)
            for parent, g in zip(node.parents, parent_grads):
                if g is None:
                    continue
                if FINITE_CHECKS and not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient out of {node.op!r}")
                if parent._node is None and parent.requires_grad:
                    parent.grad = g if parent.grad is None else parent.grad + g
                elif parent._node is not None:
                    if id(parent) in grads:
                        grads[id(parent)] = grads[id(parent)] + g
                    else:
                        grads[id(parent)] = g


def _node_set(t: Tape):
    return {n for n in t.nodes}


_state = threading.local()


def _current_tape() -> Tape | None:
    return getattr(_state, "tape", None)


class tape:
    """Context manager activating a fresh Tape on the current thread."""

    def __init__(self):
        self.tape = Tape()

    def __enter__(self) -> Tape:
        self._prev = _current_tape()
        _state.tape = self.tape
        return self.tape

    def __exit__(self, *exc) -> None:
        _state.tape = self._prev


def backward(root: Tensor) -> None:
    """Run the backward sweep on the tape that produced ``root``."""
    t = _current_tape()
    if t is None:
        raise ValueError("backward called with no active tape")
    t.backward(root)


def _record(op: str, out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if FINITE_CHECKS and not np.all(np.isfinite(out_data)):
        raise NumericError(f"non-finite values out of primitive {op!r}")
    out = Tensor(out_data)
    t = _current_tape()
    if t is not None and any(p.requires_grad or p._node is not None for p in parents):
        out.requires_grad = True
        node = _Node(op, out, parents, backward_fn)
        out._node = node
        t.nodes.append(node)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} do not match")


def _unbroadcast_scalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    if t.data.ndim == 0:
        return np.asarray(g.sum(), dtype=np.float64)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast_scalar(g, a), _unbroadcast_scalar(g, b)

    return _record("add", out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast_scalar(g, a), _unbroadcast_scalar(-g, b)

    return _record("sub", out, (a, b), bwd)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast_scalar(g * b_data, a), _unbroadcast_scalar(g * a_data, b)

    return _record("mul", out, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with optional leading batch dims on either side."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >=2-d, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims of {a.data.shape} and {b.data.shape} do not conform")
    out = np.matmul(a.data, b.data)
    a_data, b_data = a.data, b.data

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b_data, -1, -2))
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g)
        # reduce leading broadcast dims back to the operand shapes
        while ga.ndim > a_data.ndim:
            ga = ga.sum(axis=0)
        while gb.ndim > b_data.ndim:
            gb = gb.sum(axis=0)
        return ga, gb

    return _record("matmul", out, (a, b), bwd)


def transpose_last2(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise ShapeError(f"transpose_last2: operand must be >=2-d, got {a.data.shape}")
    out = np.ascontiguousarray(np.swapaxes(a.data, -1, -2))

    def bwd(g):
        return (np.swapaxes(g, -1, -2),)

    return _record("transpose_last2", out, (a,), bwd)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    # overflow-safe piecewise form
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), bwd)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, slope * a.data)

    def bwd(g):
        return (g * np.where(mask, 1.0, slope),)

    return _record("leaky_relu", out, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bwd(g):
        return (g * out,)

    return _record("exp", out, (a,), bwd)


def log(a: Tensor) -> Tensor:
    a_data = a.data
    out = np.log(a_data)

    def bwd(g):
        return (g / a_data,)

    return _record("log", out, (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def bwd(g):
        return (g * inside,)

    return _record("clamp", out, (a,), bwd)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    out = np.maximum(a.data, lo)
    mask = a.data > lo

    def bwd(g):
        return (g * mask,)

    return _record("clamp_min", out, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and normalizers


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-subtracted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _record("softmax", out, (a,), bwd)


def log_sum_exp(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis in max-subtraction form."""
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).reshape(a.data.shape[:-1])
    soft = e / s

    def bwd(g):
        return (np.expand_dims(g, -1) * soft,)

    return _record("log_sum_exp", out, (a,), bwd)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.data.shape
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(np.float64, copy=True),)
        return (np.repeat(np.expand_dims(g, axis), shape[axis], axis=axis),)

    return _record("sum", out, (a,), bwd)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).astype(np.float64, copy=True),)
        return (np.repeat(np.expand_dims(g / n, axis), shape[axis], axis=axis),)

    return _record("mean", out, (a,), bwd)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    base = parts[0].data.shape[:-1]
    for p in parts[1:]:
        if p.data.shape[:-1] != base:
            raise ShapeError(
                f"concat_last: leading shapes differ, {parts[0].data.shape} vs {p.data.shape}"
            )
    widths = [p.data.shape[-1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        return tuple(g[..., offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _record("concat_last", out, tuple(parts), bwd)


# ---------------------------------------------------------------------------
# lookup / gather


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ids is a constant integer array."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range for table with {table.data.shape[0]} rows"
        )
    out = table.data[ids]
    rows = table.data.shape[0]

    def bwd(g):
        gt = np.zeros((rows, table.data.shape[1]), dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _record("embedding", out, (table,), bwd)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis: out[...] = a[..., idx[...]]."""
    idx = np.asarray(idx)
    if idx.shape != a.data.shape[:-1]:
        raise ShapeError(
            f"gather_last: index shape {idx.shape} must match leading shape of {a.data.shape}"
        )
    out = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]
    shape = a.data.shape

    def bwd(g):
        ga = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
        return (ga,)

    return _record("gather_last", out, (a,), bwd)


# ---------------------------------------------------------------------------
# broadcast helpers (bias and row-scale patterns only)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over all leading axes (trailing-bias pattern)."""
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(f"add_bias: bias {b.data.shape} does not match input {x.data.shape}")
    out = x.data + b.data
    lead = x.data.ndim - 1

    def bwd(g):
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        return g, gb

    return _record("add_bias", out, (x, b), bwd)


def add_row_bias(x: Tensor, r: Tensor) -> Tensor:
    """x(B,L,E) + r(B,E) broadcast along the middle axis."""
    if x.data.ndim != 3 or r.data.ndim != 2 or x.data.shape[0] != r.data.shape[0] or x.data.shape[2] != r.data.shape[1]:
        raise ShapeError(f"add_row_bias: {x.data.shape} incompatible with {r.data.shape}")
    out = x.data + r.data[:, None, :]

    def bwd(g):
        return g, g.sum(axis=1)

    return _record("add_row_bias", out, (x, r), bwd)


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """x(..., E) * s(...) with s broadcast along the last axis."""
    if s.data.shape != x.data.shape[:-1]:
        raise ShapeError(f"scale_rows: {s.data.shape} must equal leading shape of {x.data.shape}")
    out = x.data * s.data[..., None]
    x_data, s_data = x.data, s.data

    def bwd(g):
        return g * s_data[..., None], (g * x_data).sum(axis=-1)

    return _record("scale_rows", out, (x, s), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gamma.data.shape != (x.data.shape[-1],) or beta.data.shape != (x.data.shape[-1],):
        raise ShapeError(
            f"layer_norm: affine shapes {gamma.data.shape}/{beta.data.shape} do not match input {x.data.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.data.shape[-1]
    g_data = gamma.data
    lead = x.data.ndim - 1

    def bwd(g):
        gxhat = g * g_data
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        axes = tuple(range(lead))
        ggamma = (g * xhat).sum(axis=axes) if lead else g * xhat
        gbeta = g.sum(axis=axes) if lead else g
        return gx, ggamma, gbeta

    return _record("layer_norm", out, (x, gamma, beta), bwd)
