"""Reverse-mode automatic differentiation over numpy arrays.

Every backward rule is itself written with :class:`Tensor` operations, so a
gradient can be differentiated again (``grad(..., create_graph=True)``).
That is what the gradient penalty of the discriminator needs.  When
``create_graph`` is off the rules run under :func:`no_grad` and cost about as
much as hand-written numpy.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def enable_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class SelectionTape:
    """Discrete choices of piecewise-linear ops (relu masks, pooling argmax).

    Recording and then replaying a tape evaluates a network on one fixed
    linear piece.  Finite differences taken under replay never straddle a
    kink, so they check exactly the derivative that autodiff computes.
    """

    def __init__(self):
        self.items: list[np.ndarray] = []
        self.cursor = 0
        self.replaying = False

    def take(self, choice: np.ndarray) -> np.ndarray:
        if not self.replaying:
            self.items.append(choice)
            return choice
        if self.cursor >= len(self.items):
            raise RuntimeError("selection tape exhausted: replayed computation differs from the recording")
        stored = self.items[self.cursor]
        self.cursor += 1
        if stored.shape != choice.shape:
            raise RuntimeError(f"selection shape {choice.shape} differs from recorded {stored.shape}")
        return stored


_TAPE: SelectionTape | None = None


@contextlib.contextmanager
def record_selections():
    global _TAPE
    prev, tape = _TAPE, SelectionTape()
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = prev


@contextlib.contextmanager
def replay_selections(tape: SelectionTape):
    global _TAPE
    prev = _TAPE
    tape.replaying, tape.cursor = True, 0
    _TAPE = tape
    try:
        yield tape
    finally:
        _TAPE = prev


def select(choice: np.ndarray) -> np.ndarray:
    """Pass a discrete choice through the active tape (identity without one)."""
    return choice if _TAPE is None else _TAPE.take(choice)


class Tensor:
    """N-d float64 array that records how it was computed.

    ``grad`` is a plain numpy array filled by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    # -- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self.parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method sugar
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.name = None
    out.requires_grad = False
    out.parents = ()
    out.backward_fn = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


# --------------------------------------------------------------- shape ops

def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    return _make(data, "sum_to", (x,), lambda g: (broadcast_to(g, x.shape),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    if x.shape == tuple(shape):
        return x
    data = np.broadcast_to(x.data, shape)
    return _make(data, "broadcast_to", (x,), lambda g: (sum_to(g, x.shape),))


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)
    return _make(data, "reshape", (x,), lambda g: (reshape(g, x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = x.data.transpose(axes)
    return _make(data, "transpose", (x,), lambda g: (transpose(g, inv),))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; the adjoint embeds into zeros."""
    x = as_tensor(x)
    data = x.data[index]
    return _make(data, "getitem", (x,), lambda g: (embed(g, index, x.shape),))


def embed(x: Tensor, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``x`` written at ``index``."""
    x = as_tensor(x)
    data = np.zeros(shape, dtype=DTYPE)
    data[index] = x.data
    return _make(data, "embed", (x,), lambda g: (getitem(g, index),))


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one ``(before, after)`` pair per axis."""
    x = as_tensor(x)
    if all(a == 0 and b == 0 for a, b in widths):
        return x
    shape = tuple(s + a + b for s, (a, b) in zip(x.shape, widths))
    index = tuple(slice(a, a + s) for s, (a, _) in zip(x.shape, widths))
    return embed(x, index, shape)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def backward(g):
        out = []
        for i in range(len(xs)):
            idx = [slice(None)] * data.ndim
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _make(data, "concat", xs, backward)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x.reshape(-1)[idx]`` with ``idx`` an integer array of any shape."""
    x = as_tensor(x)
    data = x.data.reshape(-1)[idx]
    return _make(data, "gather", (x,), lambda g: (scatter_add(g, idx, x.shape),))


def scatter_add(x: Tensor, idx: np.ndarray, shape) -> Tensor:
    """Zeros of ``shape`` (viewed flat) with ``x`` accumulated at ``idx``."""
    x = as_tensor(x)
    size = int(np.prod(shape))
    data = np.bincount(idx.reshape(-1), weights=x.data.reshape(-1), minlength=size)
    data = data.reshape(shape)
    return _make(data, "scatter_add", (x,), lambda g: (gather(g, idx),))


# ---------------------------------------------------------- elementwise ops

def _binary_shapes(a: Tensor, b: Tensor):
    return a.shape, b.shape


def _need(t: Tensor) -> bool:
    # backward rules skip work for operands outside the graph
    return t.requires_grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = _binary_shapes(a, b)
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_need(a) and sum_to(g, sa), _need(b) and sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = _binary_shapes(a, b)
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_need(a) and sum_to(g, sa), _need(b) and sum_to(neg(g), sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = _binary_shapes(a, b)
    return _make(a.data * b.data, "mul", (a, b),
                 lambda g: (_need(a) and sum_to(g * b, sa), _need(b) and sum_to(g * a, sb)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = _binary_shapes(a, b)
    return _make(a.data / b.data, "div", (a, b),
                 lambda g: (_need(a) and sum_to(g / b, sa),
                            _need(b) and sum_to(neg(g) * a / (b * b), sb)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, "pow", (a,), lambda g: (g * p * power(a, p - 1.0),))


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.exp(a.data), "exp", (a,), None)
    if out.parents:
        out.backward_fn = lambda g: (g * out,)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign so neither branch overflows
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = _make(data, "sigmoid", (a,), None)
    if out.parents:
        out.backward_fn = lambda g: (g * out * (1.0 - out),)
    return out


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(data, "softplus", (a,), lambda g: (g * sigmoid(a),))


def log_sigmoid(a) -> Tensor:
    return neg(softplus(neg(a)))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.tanh(a.data), "tanh", (a,), None)
    if out.parents:
        out.backward_fn = lambda g: (g * (1.0 - out * out),)
    return out


def lrelu(x, slope: float = 0.01) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``."""
    x = as_tensor(x)
    scale = select(np.where(x.data >= 0.0, 1.0, slope))
    return _make(x.data * scale, "lrelu", (x,), lambda g: (g * Tensor(scale),))


def relu(x) -> Tensor:
    return lrelu(x, 0.0)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside ``[lo, hi]``."""
    x = as_tensor(x)
    inside = ((x.data >= lo) & (x.data <= hi)).astype(DTYPE)
    return _make(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (g * Tensor(inside),))


def minimum(a, b) -> Tensor:
    """Elementwise min; the gradient goes to ``a`` on ties."""
    a, b = as_tensor(a), as_tensor(b)
    pick = (a.data <= b.data)
    ma = np.broadcast_to(pick, np.broadcast_shapes(a.shape, b.shape)).astype(DTYPE)
    mb = 1.0 - ma
    sa, sb = a.shape, b.shape
    return _make(np.minimum(a.data, b.data), "minimum", (a, b),
                 lambda g: (sum_to(g * Tensor(ma), sa), sum_to(g * Tensor(mb), sb)))


# ------------------------------------------------------------ reductions

def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    kept = x.data.sum(axis=axis, keepdims=True).shape

    def backward(g):
        return (broadcast_to(reshape(g, kept), x.shape),)

    return _make(data, "sum", (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


# ---------------------------------------------------------------- matmul

def matmul(a, b) -> Tensor:
    """Batched matrix product of operands with ``ndim >= 2``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(
            f"matmul inner axis mismatch: {a.shape} @ {b.shape} "
            f"(axis -1 of left is {a.shape[-1]}, axis -2 of right is {b.shape[-2]})"
        )
    sa, sb = a.shape, b.shape
    return _make(a.data @ b.data, "matmul", (a, b),
                 lambda g: (_need(a) and sum_to(g @ swap_last(b), sa),
                            _need(b) and sum_to(swap_last(a) @ g, sb)))


# ---------------------------------------------------- windowed (conv) ops

def unfold(x, kh: int, kw: int, sh: int, sw: int) -> Tensor:
    """Sliding ``kh x kw`` windows of an NCHW tensor (no padding).

    Returns shape ``(N, H', W', C*kh*kw)`` with the patch flattened in
    ``(C, kh, kw)`` order.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw][:, :, :ho, :wo]
    data = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho, wo, c * kh * kw)
    shape = x.shape
    return _make(data, "unfold", (x,), lambda g: (fold(g, shape, kh, kw, sh, sw),))


def fold(g, shape, kh: int, kw: int, sh: int, sw: int) -> Tensor:
    """Adjoint of :func:`unfold`: overlap-add patches back into ``shape``."""
    g = as_tensor(g)
    n, c, h, w = shape
    _, ho, wo, _ = g.shape
    cols = g.data.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros(shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return _make(out, "fold", (g,), lambda gg: (unfold(gg, kh, kw, sh, sw),))


# ------------------------------------------------------------- graph/backward

@dataclass
class Graph:
    """Topologically ordered nodes reachable from an output tensor."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def _accumulate(grads: dict, node: Tensor, g: Tensor) -> None:
    key = id(node)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output: Tensor | None = None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to ``inputs``.

    Inputs that ``output`` does not depend on get zeros.  With
    ``create_graph`` the returned tensors are themselves differentiable.
    """
    if grad_output is None:
        if output.size != 1:
            raise ValueError(f"grad of a non-scalar output {output.shape} needs grad_output")
        grad_output = Tensor(np.ones(output.shape))
    graph = Graph.from_output(output)
    ctx = enable_grad() if create_graph else no_grad()
    grads: dict[int, Tensor] = {id(output): as_tensor(grad_output)}
    with ctx:
        for node in reversed(graph.nodes):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is not None and pg is not False and p.requires_grad:
                    _accumulate(grads, p, pg)
            if not node.is_leaf and not any(node is i for i in inputs):
                del grads[id(node)]
    out = []
    for x in inputs:
        g = grads.get(id(x))
        out.append(g if g is not None else Tensor(np.zeros(x.shape)))
    return out


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> None:
    """Fill ``leaf.grad`` with d(loss)/d(leaf) for every requires-grad leaf.

    ``leaves`` lists extra parameters to zero-fill when ``loss`` does not
    reach them.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_output(loss)
    targets = [n for n in graph.leaves() if n.requires_grad]
    if leaves is not None:
        known = {id(t) for t in targets}
        targets += [p for p in leaves if id(p) not in known]
    grads = grad(loss, targets)
    for t, g in zip(targets, grads):
        t.grad = np.array(g.data, dtype=DTYPE)
