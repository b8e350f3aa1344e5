"""A small float64 tensor engine with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a :class:`Tape` is active,
every op whose inputs require gradients appends a record with its backward
rule; :func:`backward` walks those records in reverse.

    with Tape() as tape:
        loss = (x * x).sum()
    backward(tape, loss)
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

MASK_FILL = -1e9
LN_EPS = 1e-12
L2_EPS = 1e-12

_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("smith_tape", default=None)
_attention_counter: contextvars.ContextVar["dict[str, int] | None"] = contextvars.ContextVar(
    "smith_attention_counter", default=None
)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    __array_priority__ = 100.0

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- tape -------------------------------------------------------------------


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Records are appended in execution order, so inputs always precede the
    operations that consume them.
    """

    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: forward produced non-finite values")
    out = Tensor(data)
    tape = _tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append(_Record(out, tuple(inputs), backward, op))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that requires it.

    Gradients add into existing ``.grad`` arrays, so parameters used by
    several tapes (or several times on one tape) accumulate.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(rec.out is loss for rec in reversed(tape.records)):
        raise ValueError("loss was not produced on this tape")
    loss.grad = np.ones((), dtype=np.float64)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        for t, gt in zip(rec.inputs, rec.backward(g)):
            if gt is None or not t.requires_grad:
                continue
            t.grad = gt if t.grad is None else t.grad + gt


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data**2) / math.sqrt(2.0 * math.pi)
    return _emit("gelu", x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` is true, else ``b`` (with broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    return _emit(
        "where",
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# --- shape ------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _emit("swapaxes", np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, key) -> Tensor:
    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _emit("getitem", x.data[key], (x,), bw)


def scatter_rows(x: Tensor, index: np.ndarray, n: int) -> Tensor:
    """Rows of ``x`` placed at ``index`` in an otherwise zero ``[n, ...]`` tensor."""
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n,) + x.shape[1:], dtype=np.float64)
    out[index] = x.data
    return _emit("scatter_rows", out, (x,), lambda g: (g[index],))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


# --- reductions -------------------------------------------------------------


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


# --- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 1:
                ga = np.multiply.outer(g, b.data)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim >= 2:
                # shared weight matrix: fold the batch axes into one GEMM
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            elif b.ndim == 1:
                gb = (a.data * g[..., None]).reshape(-1, b.shape[0]).sum(axis=0)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _emit("matmul", a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --- normalisation and probabilities ----------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit(
        "softmax",
        out,
        (x,),
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    n = x.shape[-1]

    def bw(g):
        gxhat = g * gamma.data
        gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
        gg = (g * xhat).reshape(-1, n).sum(axis=0)
        gb = g.reshape(-1, n).sum(axis=0)
        return gx, gg, gb

    return _emit("layer_norm", xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Scale trailing-axis vectors to unit length; zero vectors stay zero."""
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = x.data / denom
    clipped = norm < eps

    def bw(g):
        radial = np.where(clipped, 0.0, (g * out).sum(axis=-1, keepdims=True))
        return ((g - out * radial) / denom,)

    return _emit("l2_normalize", out, (x,), bw)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup; the table gradient is accumulated only at the used rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding", table.data[ids], (table,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if n == 0:
        return Tensor(0.0)
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(n)
    loss = (logz - shifted[rows, targets]).mean()

    def bw(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _emit("cross_entropy", np.asarray(loss), (logits,), bw)


def binary_cross_entropy(prob: Tensor, labels: np.ndarray, clamp: float = 1e-7) -> Tensor:
    """Mean BCE with probabilities clamped to ``[clamp, 1 - clamp]``."""
    y = np.asarray(labels, dtype=np.float64)
    p = np.clip(prob.data, clamp, 1.0 - clamp)
    inside = (prob.data >= clamp) & (prob.data <= 1.0 - clamp)
    n = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean()

    def bw(g):
        gp = -(y / p - (1.0 - y) / (1.0 - p)) * (g / n)
        return (np.where(inside, gp, 0.0),)

    return _emit("binary_cross_entropy", np.asarray(loss), (prob,), bw)


# --- attention --------------------------------------------------------------


@contextlib.contextmanager
def count_attention():
    """Tally score-matrix entries computed by attention, keyed by scope."""
    counts: dict[str, int] = {}
    token = _attention_counter.set(counts)
    try:
        yield counts
    finally:
        _attention_counter.reset(token)


def scaled_dot_product_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: np.ndarray | None = None,
    scope: str = "attention",
) -> Tensor:
    """softmax(q k^T / sqrt(d) + M) v over the last two axes.

    ``mask`` (1 = attendable key) broadcasts against ``[..., lK]``; masked keys
    get ``MASK_FILL`` added to their scores before the softmax.
    """
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"keys and values disagree on length: {k.shape[-2]} vs {v.shape[-2]}")
    d = q.shape[-1]
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    counter = _attention_counter.get()
    if counter is not None:
        counter[scope] = counter.get(scope, 0) + int(np.prod(scores.shape, dtype=object))
    if mask is not None:
        mask = np.asarray(mask)
        if np.any(mask.sum(axis=-1) == 0):
            raise ValueError("attention row with every key masked")
        scores = add(scores, np.expand_dims((1.0 - mask) * MASK_FILL, -2))
    return matmul(softmax(scores, axis=-1), v)


# --- optimisation -----------------------------------------------------------


class Adam:
    """Bias-corrected Adam with a linear warmup on the learning rate."""

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 5e-5,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-6,
        warmup_steps: int = 0,
    ):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def current_lr(self, step: int | None = None) -> float:
        step = self.step_count if step is None else step
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        lr = self.current_lr(t)
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
