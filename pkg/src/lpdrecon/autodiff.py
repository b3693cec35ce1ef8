"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations needed by the unrolled reconstruction networks are
provided. Recording is explicit: operations performed inside a ``Graph``
context are taped, everything else is evaluated eagerly::

    with Graph() as tape:
        y = conv2d(x, w, b)
        loss = sum_squares(y)
    tape.backward(loss)
    w.grad  # dloss/dw

Convolutions are cross-correlations (no kernel flip) with one pixel of
zero padding, so 3x3 kernels preserve the spatial shape. The adjoint of
such a correlation is the full correlation with the flipped kernel, which
is what ``_conv2d_backward`` computes.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphError",
    "add",
    "sub",
    "scale",
    "mul",
    "sum_squares",
    "conv2d",
    "prelu",
    "concat_channels",
    "channels",
    "linear_operator",
    "nonlinear_operator",
]


class GraphError(RuntimeError):
    """Raised on misuse of a computation graph (e.g. a second backward pass)."""


class Tensor:
    """An array that may take part in reverse-mode differentiation.

    Parameters
    ----------
    data : array_like
        Values. Converted to a contiguous float array.
    requires_grad : bool
        Whether gradients should be accumulated into ``grad``.
    dtype : numpy dtype, optional
        ``float32`` or ``float64``. Defaults to the dtype of ``data`` when it
        is already floating point, else ``float64``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_graph", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        dtype = np.dtype(dtype)
        if dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {dtype}")
        self.data = np.asarray(data, dtype=dtype, order="C")
        if any(n <= 0 for n in self.data.shape):
            raise ValueError(f"tensor dimensions must be positive, got {self.data.shape}")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._graph: Graph | None = None
        self._node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Backpropagate from this scalar through the graph that produced it."""
        if self._graph is None:
            raise GraphError("tensor was not produced inside a recording Graph")
        self._graph.backward(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


class _Record:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_state = threading.local()


def _active_graph() -> Graph | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Graph:
    """Tape of operation records in creation (hence topological) order.

    A graph supports exactly one backward pass; saved activations are
    released afterwards and a second call raises ``GraphError``.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> Graph:
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        if self._consumed:
            raise GraphError("cannot record onto a graph that has already been backpropagated")
        for t in inputs:
            if t._graph is not None and t._graph is not self:
                raise GraphError("inputs belong to a different graph")
        output._graph = self
        output._node = len(self.records)
        self.records.append(_Record(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self._consumed:
            raise GraphError("backward already ran on this graph; re-run the forward pass")
        if loss._graph is not self:
            raise GraphError("loss was not recorded on this graph")
        if grad is None:
            if loss.size != 1:
                raise GraphError("implicit gradient requires a scalar loss")
            grad = np.ones(loss.shape, dtype=loss.dtype)
        self._consumed = True

        grads: list[np.ndarray | None] = [None] * len(self.records)
        grads[loss._node] = np.asarray(grad, dtype=loss.dtype)
        for idx in range(loss._node, -1, -1):
            rec = self.records[idx]
            gout = grads[idx]
            grads[idx] = None
            if gout is None:
                rec.backward = None
                continue
            in_grads = rec.backward(gout)
            rec.backward = None
            for t, g in zip(rec.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if t._graph is self:
                    prev = grads[t._node]
                    grads[t._node] = g if prev is None else prev + g
                else:
                    t.grad = g.copy() if t.grad is None else t.grad + g
        for rec in self.records:
            rec.backward = None


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=like.dtype if like is not None else None)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    graph = _active_graph()
    record = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=record)
    if record:
        graph._record(op, inputs, out, backward)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same_shape(a, b, "add")
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a)
    _check_same_shape(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def scale(a: Tensor, alpha: float) -> Tensor:
    """Multiply by a constant (non-differentiable) scalar."""
    alpha = float(alpha)
    return _make("scale", a.data * a.dtype.type(alpha), (a,), lambda g: (g * a.dtype.type(alpha),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; ``b`` may also hold a single (learnable) scalar."""
    a, b = _as_tensor(a), _as_tensor(b, a)
    if b.size == 1 and a.size != 1:
        bv = b.data.reshape(())

        def backward(g):
            return g * bv, np.sum(g * a.data).reshape(b.shape)

        return _make("mul", a.data * bv, (a, b), backward)
    _check_same_shape(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_squares(a: Tensor) -> Tensor:
    """Sum of squared entries, returned as a 0-d tensor."""
    x = a.data
    return _make("sum_squares", np.asarray(np.vdot(x, x), dtype=a.dtype), (a,), lambda g: (2 * g * x,))


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------

def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    # Pad once into a (C, B*Hp*Wp) layout: every kernel tap is then a
    # contiguous offset slice, so the whole layer is one GEMM plus nine
    # shifted accumulations, without an im2col copy.
    n, c, h, wd = x.shape
    o = w.shape[0]
    hp, wp = h + 2, wd + 2
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    xf = xp.reshape(c, -1)
    span = xf.shape[1] - (2 * wp + 2)
    taps = w.transpose(2, 3, 0, 1).reshape(9 * o, c) @ xf
    acc = np.zeros((o, xf.shape[1]), dtype=x.dtype)
    for k in range(9):
        off = (k // 3) * wp + k % 3
        acc[:, :span] += taps[k * o:(k + 1) * o, off:off + span]
    out = acc.reshape(o, n, hp, wp)[:, :, :h, :wd].transpose(1, 0, 2, 3)
    out = out + b.reshape(1, o, 1, 1)
    return np.ascontiguousarray(out), xf


def _conv2d_backward(gout: np.ndarray, xf: np.ndarray, w: np.ndarray, x_shape):
    n, c, h, wd = x_shape
    o = w.shape[0]
    hp, wp = h + 2, wd + 2
    span = xf.shape[1] - (2 * wp + 2)
    gext = np.zeros((o, n, hp, wp), dtype=gout.dtype)
    gext[:, :, :h, :wd] = gout.transpose(1, 0, 2, 3)
    gext = gext.reshape(o, -1)

    gb = gout.sum(axis=(0, 2, 3))
    gw = np.empty_like(w)
    g_head = gext[:, :span]
    for k in range(9):
        off = (k // 3) * wp + k % 3
        gw[:, :, k // 3, k % 3] = g_head @ xf[:, off:off + span].T

    back = w.transpose(2, 3, 1, 0).reshape(9 * c, o) @ g_head
    gxf = np.zeros_like(xf)
    for k in range(9):
        off = (k // 3) * wp + k % 3
        gxf[:, off:off + span] += back[k * c:(k + 1) * c]
    gx = gxf.reshape(c, n, hp, wp)[:, :, 1:-1, 1:-1].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(gx), gw, gb


def conv2d(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation with one pixel of zero padding, plus bias.

    ``x`` is ``(batch, in_ch, H, W)``, ``weights`` is ``(out_ch, in_ch, 3, 3)``
    and ``bias`` is ``(out_ch,)``. Output channel ``k`` is
    ``bias[k] + sum_l correlate(x[:, l], weights[k, l])``.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects a 4-d input, got shape {x.shape}")
    if weights.ndim != 4 or weights.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects (out, in, 3, 3) weights, got {weights.shape}")
    if weights.shape[1] != x.shape[1]:
        raise ValueError(
            f"conv2d: weights expect {weights.shape[1]} input channels, input has {x.shape[1]}"
        )
    if bias.shape != (weights.shape[0],):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {weights.shape[0]} outputs")
    dtype = x.dtype
    w = weights.data.astype(dtype, copy=False)
    out, xf = _conv2d_forward(x.data, w, bias.data.astype(dtype, copy=False))

    def backward(g):
        gx, gw, gb = _conv2d_backward(g, xf, w, x.shape)
        return gx, gw.astype(weights.dtype, copy=False), gb.astype(bias.dtype, copy=False)

    return _make("conv2d", out, (x, weights, bias), backward)


def prelu(x: Tensor, c: Tensor) -> Tensor:
    """Parametric rectifier ``x if x >= 0 else -c * x`` with one ``c`` per channel.

    The sign convention is deliberate: a coefficient of ``-0.01`` gives the
    usual leaky slope of ``+0.01``.
    """
    if x.ndim < 2 or c.shape != (x.shape[1],):
        raise ValueError(f"prelu: coefficient shape {c.shape} does not match channels of {x.shape}")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    cb = c.data.reshape(bshape).astype(x.dtype, copy=False)
    neg = x.data < 0
    out = np.where(neg, -cb * x.data, x.data)
    axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = np.where(neg, -cb * g, g)
        gc = np.sum(np.where(neg, -x.data * g, 0), axis=axes)
        return gx, gc.astype(c.dtype, copy=False)

    return _make("prelu", out, (x, c), backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate ``(batch, ch, H, W)`` tensors along the channel axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {ref} and {p.shape}")
    bounds = np.cumsum([p.shape[1] for p in parts])[:-1]
    data = np.concatenate([p.data for p in parts], axis=1)
    return _make("concat", data, parts, lambda g: tuple(np.split(g, bounds, axis=1)))


def channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Select the channel range ``[start, stop)`` of a ``(batch, ch, ...)`` tensor."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"invalid channel range [{start}, {stop}) for {x.shape[1]} channels")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make("channels", x.data[:, start:stop].copy(), (x,), backward)


# ---------------------------------------------------------------------------
# wrappers for external operators
# ---------------------------------------------------------------------------

def _check_trailing(shape, declared, what):
    if declared is None:
        return
    declared = tuple(declared)
    if tuple(shape[len(shape) - len(declared):]) != declared or len(shape) < len(declared):
        raise ValueError(f"{what} shape {shape} does not end with declared shape {declared}")


def linear_operator(forward: Callable, adjoint: Callable, x: Tensor,
                    domain_shape=None, range_shape=None) -> Tensor:
    """Apply an external linear operator; backward applies its adjoint.

    ``forward`` and ``adjoint`` act on numpy arrays. ``adjoint`` must be the
    exact transpose of ``forward`` for gradients to be correct. Declared
    domain/range shapes, when given, are checked against trailing axes.
    """
    _check_trailing(x.shape, domain_shape, "operator input")
    y = np.asarray(forward(x.data), dtype=x.dtype)
    _check_trailing(y.shape, range_shape, "operator output")

    def backward(g):
        gx = np.asarray(adjoint(g), dtype=x.dtype)
        if gx.shape != x.shape:
            raise ValueError(f"adjoint returned shape {gx.shape}, expected {x.shape}")
        return (gx,)

    return _make("linear_operator", y, (x,), backward)


def nonlinear_operator(forward: Callable, derivative_adjoint: Callable, x: Tensor,
                       domain_shape=None, range_shape=None) -> Tensor:
    """Apply an external non-linear operator.

    ``derivative_adjoint(point, cotangent)`` must return ``[dF(point)]^T
    cotangent``; backward evaluates it at the input saved during forward.
    """
    _check_trailing(x.shape, domain_shape, "operator input")
    point = x.data.copy()
    y = np.asarray(forward(point), dtype=x.dtype)
    _check_trailing(y.shape, range_shape, "operator output")

    def backward(g):
        gx = np.asarray(derivative_adjoint(point, g), dtype=x.dtype)
        if gx.shape != x.shape:
            raise ValueError(f"derivative adjoint returned shape {gx.shape}, expected {x.shape}")
        return (gx,)

    return _make("nonlinear_operator", y, (x,), backward)
