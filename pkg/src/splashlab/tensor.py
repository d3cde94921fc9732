"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Graph` are recorded in order;
``Graph.backward`` replays the tape in exact reverse order. Outside a graph,
operations compute values only.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the tape (backward before forward, non-scalar loss, reuse)."""


_GRAPH_STACK: list["Graph"] = []


def current_graph() -> "Graph | None":
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Tensor:
    """An n-dimensional float64 array that can take part in a recorded graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    # -- method forms ---------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs_(self)

    def sign(self):
        return sign(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)


def _raise_item(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


class Parameter(Tensor):
    """A trainable leaf. ``velocity`` holds optimizer momentum state."""

    def __init__(self, data, name: str | None = None, trainable: bool = True, decay: bool = False):
        super().__init__(data, requires_grad=trainable, name=name)
        self.decay = decay
        self.velocity: np.ndarray | None = None

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------
class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, vjp: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Gradients:
    """Mapping from leaf tensors (by identity) to their gradient arrays."""

    def __init__(self):
        self._entries: dict[int, tuple[Tensor, np.ndarray]] = {}

    def __getitem__(self, t: Tensor) -> np.ndarray:
        return self._entries[id(t)][1]

    def __contains__(self, t) -> bool:
        return id(t) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, t, default=None):
        entry = self._entries.get(id(t))
        return default if entry is None else entry[1]

    def items(self) -> list[tuple[Tensor, np.ndarray]]:
        return list(self._entries.values())

    def _set(self, t: Tensor, g: np.ndarray) -> None:
        self._entries[id(t)] = (t, g)


class Graph:
    """Recording of primitive operations for a single forward/backward pass.

    Use as a context manager; operations on tensors that require gradients
    are appended in execution order. After :meth:`backward` the tape is
    discarded.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Graph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _GRAPH_STACK.remove(self)

    def record(self, node: Node) -> None:
        if self.consumed:
            raise GraphError("cannot record on a graph after backward")
        self.nodes.append(node)
        node.output._graph = self

    def backward(self, loss: Tensor) -> Gradients:
        if self.consumed:
            raise GraphError("graph already consumed by a previous backward pass")
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._graph is not self:
            raise GraphError("backward called before a forward pass recorded the loss on this graph")
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = acc.pop(id(node.output), None)
            if g is None:
                continue
            grads = node.vjp(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in acc:
                    acc[key] = acc[key] + gi
                else:
                    acc[key] = np.array(gi, dtype=np.float64, copy=True)
                if inp._graph is not self:
                    leaves[key] = inp
        out = Gradients()
        for key, t in leaves.items():
            g = acc.get(key)
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g
            out._set(t, g)
        self.nodes = []
        self.consumed = True
        return out


def _check_finite(op: str, value: np.ndarray) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(op: str, value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    _check_finite(op, value)
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.name = None
    out._graph = None
    needs = any(t.requires_grad for t in inputs)
    graph = current_graph()
    out.requires_grad = bool(needs and graph is not None)
    if out.requires_grad:
        graph.record(Node(op, tuple(inputs), out, vjp))
    return out


def primitive(op: str, value, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Record a custom primitive.

    ``vjp(g)`` receives the output cotangent and returns one gradient (or
    ``None``) per input, already reduced to each input's shape.
    """
    return _make(op, value, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")
    q = a.data / b.data
    return _make("div", q, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * q / b.data, b.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        val = a.data ** p
    return _make("pow", val, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


# ---------------------------------------------------------------------------
# elementwise unary
# ---------------------------------------------------------------------------
def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at 0 is 0
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0),))


def sign(a) -> Tensor:
    a = as_tensor(a)
    return _make("sign", np.sign(a.data), (a,), lambda g: (np.zeros_like(a.data),))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: non-positive input")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _stable_sigmoid(a.data)
    return _make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    val = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make("sum", val, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    val = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make("mean", val, (a,), vjp)


def reshape(a, shape: Iterable[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        val = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return _make("reshape", val, (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# linear algebra and spatial ops
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def conv2d(x, w, b=None) -> Tensor:
    """Valid, stride-1 cross-correlation. x: (N,C,H,W), w: (O,C,k,k), b: (O,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2] != w.shape[3] or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    if k > h or k > wd:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    ho, wo = h - k + 1, wd - k + 1
    cols = sliding_window_view(x.data, (k, k), axis=(2, 3))          # n,c,ho,wo,k,k
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wf = w.data.reshape(o, c * k * k)
    out = (cols @ wf.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    inputs = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {b.shape} does not match {o} output channels")
        out = out + b.data.reshape(1, o, 1, 1)
        inputs.append(b)

    def vjp(g):
        gf = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gf.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gf @ wf).reshape(n, ho, wo, c, k, k)
            gx = np.zeros(x.shape)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make("conv2d", out, tuple(inputs), vjp)


def maxpool2x2(x) -> Tensor:
    """Non-overlapping 2x2 max pooling on (N,C,H,W) with even H and W."""
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2x2: window does not tile input shape {x.shape}")
    n, c, h, w = x.shape
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make("maxpool2x2", out, (x,), vjp)


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------
def log_softmax(logits: Tensor) -> Tensor:
    """Row-wise log-softmax over the last axis, stabilised by max subtraction."""
    shift = Tensor(logits.data.max(axis=-1, keepdims=True))
    z = logits - shift
    return z - log(exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: Tensor) -> Tensor:
    return exp(log_softmax(logits))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def grad(fn: Callable[..., Tensor], *args: Tensor) -> tuple[Tensor, list[np.ndarray]]:
    """Evaluate ``fn(*args)`` on a fresh graph and return (output, d output / d args)."""
    with Graph() as g:
        out = fn(*args)
        grads = g.backward(out)
    return out, [grads.get(a, np.zeros_like(a.data)) for a in args]
