"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable operation records a node on the active :class:`Tape`.
A node stores its parents and a vector-Jacobian closure over the partials
saved during the forward pass.  :meth:`Tensor.backward` walks the tape in
reverse recording order (a valid reverse topological order, since the tape
is append-only) and visits every node exactly once.

A tape can be replayed only once.  Recording a new operation after a
backward pass starts a fresh tape automatically.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

# Library-wide clamp applied to probabilities before taking a logit.
PROB_EPS = 1e-6

_node_ids = itertools.count()


class ShapeError(ValueError):
    """Inputs of an operation have incompatible shapes."""


class TapeError(RuntimeError):
    """Misuse of the recording tape (replay, non-scalar root)."""


class Tape:
    """Append-only record of the operations of one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.consumed = False

    def append(self, node: "Tensor") -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self):
        return len(self.nodes)


_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("pact_tape", default=None)
_recording: contextvars.ContextVar[bool] = contextvars.ContextVar("pact_recording", default=True)


def current_tape() -> Tape:
    tape = _tape.get()
    if tape is None or tape.consumed:
        tape = Tape()
        _tape.set(tape)
    return tape


@contextlib.contextmanager
def new_tape():
    """Record everything inside the block on a fresh tape."""
    tape = Tape()
    token = _tape.set(tape)
    try:
        yield tape
    finally:
        _tape.reset(token)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; all results are constants."""
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def is_recording() -> bool:
    return _recording.get()


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.dtype != np.float64:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """Dense float64 tensor with an optional adjoint slot.

    Leaves created with ``requires_grad=True`` are parameters; their adjoints
    accumulate across backward passes until :meth:`zero_grad`.
    """

    __array_priority__ = 100.0
    __slots__ = ("value", "grad", "requires_grad", "name", "node_id",
                 "_parents", "_vjp", "_tape", "_index", "kind")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = _as_array(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._tape: Tape | None = None
        self._index = -1
        self.kind = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    @property
    def adjoint(self) -> np.ndarray:
        """Adjoint, or zeros when nothing has flowed into this tensor."""
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.size == 1 else float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, kind={self.kind}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- reverse pass -----------------------------------------------------
    def backward(self):
        """Propagate d(self)/d(.) to every node recorded before ``self``."""
        if self.size != 1:
            raise TapeError(f"backward root must be scalar, got shape {self.shape}")
        if self._tape is None:
            # constant root (nothing recorded, e.g. stop_gradient of a leaf)
            return
        tape = self._tape
        if tape.consumed:
            raise TapeError("tape already replayed; re-run the forward pass before calling backward again")
        tape.consumed = True
        grads: dict[int, np.ndarray] = {self.node_id: np.ones_like(self.value)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(tape.nodes[: self._index + 1]):
            g = grads.pop(node.node_id, None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if parent.is_leaf:
                    leaves[parent.node_id] = parent
                pid = parent.node_id
                grads[pid] = pg if pid not in grads else grads[pid] + pg
        for pid, leaf in leaves.items():
            g = grads.get(pid)
            if g is not None:
                leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        tape.nodes.clear()


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._vjp is not None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], vjp: Callable, kind: str) -> Tensor:
    out = Tensor(value)
    out.kind = kind
    if is_recording() and any(_needs_grad(p) for p in parents):
        tape = current_tape()
        out._parents = tuple(parents)
        out._vjp = vjp
        out._tape = tape
        out._index = tape.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av ** exponent, (a,), lambda g: (g * exponent * av ** (exponent - 1),), "pow")


def maximum(a, c: float) -> Tensor:
    """Elementwise max with a constant; the subgradient at ties goes to ``a``."""
    a = as_tensor(a)
    keep = a.value >= c
    return _make(np.where(keep, a.value, c), (a,), lambda g: (g * keep,), "maximum")


def relu(a) -> Tensor:
    return maximum(a, 0.0)


def where(cond, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is constant."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    try:
        np.broadcast_shapes(cond.shape, a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"where: incompatible shapes {a.shape} and {b.shape} under mask {cond.shape}") from None
    return _make(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


# -- elementwise unary ----------------------------------------------------------


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid_np(np.atleast_1d(a.value)).reshape(a.shape)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def logit(p) -> Tensor:
    """log(p / (1 - p)) with ``p`` clamped to [PROB_EPS, 1 - PROB_EPS]."""
    p = as_tensor(p)
    inside = (p.value >= PROB_EPS) & (p.value <= 1.0 - PROB_EPS)
    q = np.clip(p.value, PROB_EPS, 1.0 - PROB_EPS)
    return _make(np.log(q) - np.log1p(-q), (p,),
                 lambda g: (np.where(inside, g / (q * (1.0 - q)), 0.0),), "logit")


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,), "log")


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.value)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)), stable for large |a|."""
    a = as_tensor(a)
    av = a.value
    out = -np.logaddexp(0.0, -av)
    s = _sigmoid_np(np.atleast_1d(-av)).reshape(av.shape)
    return _make(out, (a,), lambda g: (g * s,), "log_sigmoid")


def stop_gradient(a) -> Tensor:
    """Identity on values; contributes nothing to the adjoints of ``a``."""
    a = as_tensor(a)
    return Tensor(a.value.copy())


# -- shape and reductions -------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), vjp, "sum")


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return reduce_sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.value[index]

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, dtype=np.float64), (a,), vjp, "take")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    out = np.stack([t.value for t in ts], axis=axis)
    return _make(out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))), "stack")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),), "log_softmax")


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Per-row negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_cross_entropy: incompatible shapes {logits.shape} and {labels.shape}")
    rows = np.arange(labels.size)
    shifted = logits.value - logits.value.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    out = logz - shifted[rows, labels]
    soft = np.exp(shifted - logz[:, None])

    def vjp(g):
        d = soft.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _make(out, (logits,), vjp, "softmax_cross_entropy")


# -- convolution and pooling ------------------------------------------------------


def conv3x3(x, w, stride: int = 1) -> Tensor:
    """Direct 3x3 convolution with zero 'same' padding.

    ``x`` is (batch, c_in, h, w); ``w`` is (c_out, c_in, 3, 3).  With stride 2
    the output is (h + 1) // 2 by (w + 1) // 2.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.shape[1:] != (x.shape[1], 3, 3):
        raise ShapeError(f"conv3x3: incompatible shapes {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    xp = np.pad(x.value, ((0, 0), (0, 0), (1, 1), (1, 1)))
    wv = w.value
    out = np.zeros((n, wv.shape[0], ho, wo))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for di in range(3):
        for dj in range(3):
            patch = xp[:, :, di:di + span_h:stride, dj:dj + span_w:stride]
            out += np.einsum("bchw,oc->bohw", patch, wv[:, :, di, dj], optimize=True)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wv)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, :, di:di + span_h:stride, dj:dj + span_w:stride]
                gw[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, patch, optimize=True)
                gxp[:, :, di:di + span_h:stride, dj:dj + span_w:stride] += np.einsum(
                    "bohw,oc->bchw", g, wv[:, :, di, dj], optimize=True)
        return gxp[:, :, 1:-1, 1:-1], gw

    return _make(out, (x, w), vjp, "conv3x3")


def conv1x1(x, w, stride: int = 1) -> Tensor:
    """Pointwise convolution; ``w`` is (c_out, c_in)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1: incompatible shapes {x.shape} and {w.shape}")
    xs = x.value[:, :, ::stride, ::stride]
    wv = w.value
    out = np.einsum("bchw,oc->bohw", xs, wv, optimize=True)

    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[:, :, ::stride, ::stride] = np.einsum("bohw,oc->bchw", g, wv, optimize=True)
        return gx, np.einsum("bohw,bchw->oc", g, xs, optimize=True)

    return _make(out, (x, w), vjp, "conv1x1")


def global_avg_pool(x) -> Tensor:
    """(batch, c, h, w) -> (batch, c)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-d input, got shape {x.shape}")
    return reduce_mean(x, axis=(2, 3))


def avg_pool(x, n: int) -> Tensor:
    """Mean over non-overlapping n x n patches of the last two axes."""
    x = as_tensor(x)
    if n == 1:
        return x
    *lead, h, w = x.shape
    if h % n or w % n:
        raise ShapeError(f"avg_pool: spatial shape {(h, w)} not divisible by patch {n}")
    v = x.value.reshape(*lead, h // n, n, w // n, n).mean(axis=(-3, -1))

    def vjp(g):
        return (np.repeat(np.repeat(g, n, axis=-2), n, axis=-1) / (n * n),)

    return _make(v, (x,), vjp, "avg_pool")


def upsample(x, n: int) -> Tensor:
    """Repeat each entry of the last two axes into an n x n patch."""
    x = as_tensor(x)
    if n == 1:
        return x
    *lead, h, w = x.shape
    v = np.repeat(np.repeat(x.value, n, axis=-2), n, axis=-1)

    def vjp(g):
        return (g.reshape(*lead, h, n, w, n).sum(axis=(-3, -1)),)

    return _make(v, (x,), vjp, "upsample")


# -- generic dispatch -----------------------------------------------------------

OPS: dict[str, Callable[..., Tensor]] = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "pow": power,
    "matmul": matmul, "conv3x3": conv3x3, "conv1x1": conv1x1,
    "global_avg_pool": global_avg_pool, "avg_pool": avg_pool, "upsample": upsample,
    "sigmoid": sigmoid, "logit": logit, "log": log, "exp": exp, "tanh": tanh,
    "log_sigmoid": log_sigmoid, "sum": reduce_sum, "mean": reduce_mean,
    "log_softmax": log_softmax, "softmax_cross_entropy": softmax_cross_entropy,
    "maximum": maximum, "relu": relu, "stop_gradient": stop_gradient,
    "reshape": reshape, "where": where,
}


def record(kind: str, inputs: Iterable, **attrs) -> Tensor:
    """Apply the operation named ``kind`` to ``inputs`` and record it."""
    try:
        op = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return op(*inputs, **attrs)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)
