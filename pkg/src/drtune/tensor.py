"""Dense reverse-mode autodiff on float64 numpy arrays.

Operations append records to the active :class:`GradTape`. Only tensors that
are trainable leaves, or were produced by a live tape record, are tracked;
everything else is a constant and costs nothing on the backward pass.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DivisionByZero, DomainError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "drtune_active_tape", default=None
)


@dataclass(eq=False)
class Node:
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    op: str
    detached: bool = False
    tape: "GradTape | None" = None


@dataclass(eq=False)
class GradTape:
    """Append-only operation log; entries are in topological order by construction."""

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Evaluate without recording (values identical, nothing tracked)."""

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name")
    __array_priority__ = 100  # so ndarray <op> Tensor defers to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def std(self, axis=None):
        return reduce("std", self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    result = Tensor(out)
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return result
    if any(_is_live(t, tape) for t in inputs):
        node = Node(inputs, result, backward_fn, op, tape=tape)
        tape.nodes.append(node)
        result.node = node
    return result


def _is_live(t: Tensor, tape: GradTape) -> bool:
    if t.requires_grad:
        return True
    node = t.node
    # a tensor left over from an older tape is a constant here
    return node is not None and not node.detached and node.tape is tape


# ---------------------------------------------------------------- elementwise


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if b.data.ndim != 0 and a.data.ndim != 0 and a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, t: Tensor) -> np.ndarray:
    return g if g.shape == t.shape else np.asarray(g.sum()).reshape(t.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (_unscalar(g, a), _unscalar(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "mul")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (_unscalar(g * bd, a), _unscalar(g * ad, b)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_pair(a, b, "div")
    if np.any(b.data == 0):
        raise DivisionByZero("div: divisor has zero entries", shape=b.shape)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out, (a, b), lambda g: (_unscalar(g / bd, a), _unscalar(-g * out / bd, b)), "div"
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: non-positive input")
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g / (2.0 * np.where(out > 0, out, 1.0)), 0.0),)

    return _record(out, (a,), back, "sqrt")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    sig = _sigmoid(ad)
    out = ad * sig
    return _record(out, (a,), lambda g: (g * (sig + out * (1.0 - sig)),), "silu")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the input is inside the range."""
    a = as_tensor(a)
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return _record(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,), "clip")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "abs": absolute,
    "square": square,
    "silu": silu,
    "exp": exp,
    "sqrt": sqrt,
    "log": log,
    "neg": neg,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; binary kinds take ``b`` (tensor or scalar)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a) if b is None else fn(a, b)


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    """Matrix product. Leading batch dims follow numpy.matmul; grads are summed back."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _sum_to(ga, ad.shape), _sum_to(gb, bd.shape)

    return _record(ad @ bd, (a, b), back, "matmul")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    return g


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose expects rank 2, got {a.shape}")
    return _record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def add_bias(x, bias) -> Tensor:
    """``x[..., j] + bias[j]``; the one broadcast the MLP layers need."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {bias.shape}")
    lead = tuple(range(x.ndim - 1))
    return _record(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=lead)), "add_bias")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tensors, back, "concat")


def flip_lr(x) -> Tensor:
    """Mirror along the last (width) axis. Rank 2 images, or rank 3 with a leading axis."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"flip_lr needs rank >= 2, got {x.shape}")
    return _record(x.data[..., ::-1].copy(), (x,), lambda g: (g[..., ::-1],), "flip_lr")


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    mx = x.data.max(axis=axis, keepdims=True)
    ex = np.exp(x.data - mx)
    s = ex.sum(axis=axis, keepdims=True)
    out = (np.log(s) + mx).squeeze(axis)
    soft = ex / s
    return _record(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def take_columns(x, index: np.ndarray) -> Tensor:
    """Row-wise gather: ``out[i] = x[i, index[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def back(g):
        gx = np.zeros_like(x.data)
        gx[rows, index] = g
        return (gx,)

    return _record(x.data[rows, index], (x,), back, "take_columns")


def gather(x, index) -> Tensor:
    """``x[index]`` along the first axis; repeated indices accumulate on the way back."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record(x.data[index], (x,), back, "gather")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce(kind: str, x, axis=None) -> Tensor:
    """sum / mean / std (population, divides by N) over ``axis`` (default: everything)."""
    x = as_tensor(x)
    if x.size == 0:
        raise ShapeError("reduce on an empty tensor")
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    xd = x.data

    def expand(g):
        return np.broadcast_to(np.expand_dims(g, axes), xd.shape) if axes else g

    if kind == "sum":
        return _record(xd.sum(axis=axes), (x,), lambda g: (expand(g).copy(),), "sum")
    if kind == "mean":
        return _record(xd.mean(axis=axes), (x,), lambda g: (expand(g) / n,), "mean")
    if kind == "std":
        centered = xd - xd.mean(axis=axes, keepdims=True)
        out = np.sqrt((centered**2).sum(axis=axes) / n)

        def back(g):
            safe = np.where(out > 0, out, 1.0)
            scale = np.where(out > 0, g / (n * safe), 0.0)
            return (expand(scale) * centered,)

        return _record(out, (x,), back, "std")
    raise ValueError(f"unknown reduction {kind!r}")


# ---------------------------------------------------------------- gradients


def stop_gradient(x) -> Tensor:
    """Same values, no gradient through this edge."""
    x = as_tensor(x)
    out = Tensor(x.data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None:
        node = Node((x,), out, None, "stop_gradient", detached=True, tape=tape)
        tape.nodes.append(node)
        out.node = node
    return out


def backward(
    loss: Tensor, tape: GradTape, wrt: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for trainable leaves.

    With ``wrt`` given, exactly those tensors are keys (zeros where unreachable).
    Otherwise every ``requires_grad`` leaf that appears on the tape is returned.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if loss.requires_grad and loss.node is None:
        leaves[id(loss)] = loss
    grads[id(loss)] = np.ones_like(loss.data)
    owner_ok = loss.node is not None and loss.node.tape is tape

    for node in reversed(tape.nodes):
        for t in node.inputs:
            if t.requires_grad and t.node is None:
                leaves.setdefault(id(t), t)
        if not owner_ok or node.detached:
            continue
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not _is_live(t, tape):
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi

    targets = list(wrt) if wrt is not None else list(leaves.values())
    out: dict[Tensor, np.ndarray] = {}
    for p in targets:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
    return out


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / (|central difference| + 1e-8)."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with GradTape() as tape:
        out = f(leaf)
    analytic = backward(out, tape, [leaf])[leaf].reshape(-1)

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += step
            xm = flat.copy()
            xm[i] -= step
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
            numeric[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(err.max())
