"""Define-by-run reverse-mode automatic differentiation over small dense arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output adjoint to parent adjoints. :func:`backward` walks
the recorded graph in reverse topological order. All values are float64.
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Callable, Iterable, Mapping, Sequence
from contextlib import contextmanager

import numpy as np

__all__ = [
    "GraphError",
    "Parameter",
    "Tensor",
    "abs",
    "add",
    "backward",
    "clip",
    "concat",
    "constant",
    "cos",
    "div",
    "exp",
    "finite_difference_check",
    "gradient_errors",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "power",
    "relu",
    "reshape",
    "sigmoid",
    "sin",
    "softmax",
    "stack",
    "stop_gradient",
    "sub",
    "sum",
    "take",
    "tanh",
    "tensor",
    "transpose",
]

_ids = itertools.count()
_state = threading.local()

# derivative cap for power(x, p<1) at x == 0
POWER_GRAD_CAP = 1e6


class GraphError(RuntimeError):
    """Raised for malformed graphs (non-scalar loss, cycles)."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Evaluate without recording parents, e.g. for validation passes."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A node of the tape: value, adjoint, producing op and parent links."""

    __slots__ = ("_backward", "adjoint", "id", "name", "op", "parents", "requires_grad", "value")

    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False, op: str = "leaf", name: str | None = None):
        self.id = next(_ids)
        self.value = np.asarray(value, dtype=np.float64)
        self.adjoint: np.ndarray | None = None
        self.op = op
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op!r}, shape={self.shape}{label})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf. ``name`` is filled in by the owning module's enumeration."""

    __slots__ = ("trainable",)

    def __init__(self, value, name: str | None = None, trainable: bool = True):
        super().__init__(np.array(value, dtype=np.float64), requires_grad=trainable, op="parameter", name=name)
        self.trainable = trainable


def tensor(value, requires_grad: bool = False) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, requires_grad=requires_grad)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False, op="constant")


def _make(value, parents: Sequence[Tensor], op: str, grad_fn) -> Tensor:
    out = Tensor(value, op=op)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out._backward = grad_fn
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


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# binary ops


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("add", a, b)
    return _make(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("sub", a, b)
    return _make(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = tensor(a), tensor(b)
    _check_broadcast("mul", a, b)
    return _make(
        a.value * b.value,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast("div", a, b)
    out = a.value / b.value
    return _make(
        out,
        (a, b),
        "div",
        lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * out / b.value, b.shape)),
    )


def neg(a) -> Tensor:
    a = tensor(a)
    return _make(-a.value, (a,), "neg", lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product; both operands need at least two dimensions."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.value @ b.value, (a, b), "matmul", grad_fn)


def concat(items: Sequence, axis: int = -1) -> Tensor:
    items = [tensor(x) for x in items]
    ref = items[0].shape
    ax = axis % len(ref)
    for x in items[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in items]}")
    sizes = [x.shape[ax] for x in items]
    cuts = np.cumsum(sizes)[:-1]
    return _make(
        np.concatenate([x.value for x in items], axis=ax),
        items,
        "concat",
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


def stack(items: Sequence, axis: int = 0) -> Tensor:
    items = [tensor(x) for x in items]
    shapes = {x.shape for x in items}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes differ {[t.shape for t in items]}")
    out = np.stack([x.value for x in items], axis=axis)
    ax = axis % out.ndim
    return _make(
        out,
        items,
        "stack",
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(items))),
    )


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.value, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def take(table, indices) -> Tensor:
    """Row gather ``table[indices]``; the embedding lookup primitive."""
    table = tensor(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take: index out of range for table with {table.shape[0]} rows")

    def grad_fn(g):
        out = np.zeros_like(table.value)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _make(table.value[idx], (table,), "take", grad_fn)


# ---------------------------------------------------------------------------
# reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum", grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(a.value.mean(axis=axis, keepdims=keepdims), (a,), "mean", grad_fn)


# ---------------------------------------------------------------------------
# elementwise


def sigmoid(a) -> Tensor:
    a = tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = tensor(a)
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = tensor(a)
    out = np.tanh(a.value)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def sin(a) -> Tensor:
    a = tensor(a)
    return _make(np.sin(a.value), (a,), "sin", lambda g: (g * np.cos(a.value),))


def cos(a) -> Tensor:
    a = tensor(a)
    return _make(np.cos(a.value), (a,), "cos", lambda g: (-g * np.sin(a.value),))


def log(a) -> Tensor:
    a = tensor(a)
    if np.any(a.value <= 0):
        raise ValueError("log: argument must be strictly positive")
    return _make(np.log(a.value), (a,), "log", lambda g: (g / a.value,))


def exp(a) -> Tensor:
    a = tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def abs(a) -> Tensor:
    a = tensor(a)
    # sign(0) == 0, so the derivative at the kink is 0
    return _make(np.abs(a.value), (a,), "abs", lambda g: (g * np.sign(a.value),))


def power(a, p: float, grad_cap: float = POWER_GRAD_CAP) -> Tensor:
    a = tensor(a)
    p = float(p)
    if not p.is_integer() and np.any(a.value < 0):
        raise ValueError(f"power: negative base with non-integer exponent {p}")

    def grad_fn(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(a.value, p - 1.0)
        d = np.nan_to_num(d, nan=grad_cap, posinf=grad_cap, neginf=-grad_cap)
        return (g * np.clip(d, -grad_cap, grad_cap),)

    return _make(np.power(a.value, p), (a,), "power", grad_fn)


def softmax(a, axis: int = -1) -> Tensor:
    a = tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(
        out,
        (a,),
        "softmax",
        lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    a = tensor(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _make(np.clip(a.value, lo, hi), (a,), "clip", lambda g: (g * inside,))


def stop_gradient(a) -> Tensor:
    """Forward identity (same values, fresh array); contributes no adjoint to ``a``."""
    a = tensor(a)
    out = Tensor(a.value.copy(), op="stop_gradient")
    if _grad_enabled():
        out.parents = (a,)
    return out


# ---------------------------------------------------------------------------
# reverse sweep


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack_: list[tuple[Tensor, Iterable[Tensor]]] = [(root, iter(root.parents))]
    state[root.id] = 1
    while stack_:
        node, it = stack_[-1]
        for parent in it:
            mark = state.get(parent.id, 0)
            if mark == 1:
                raise GraphError(f"cycle detected through node {parent.id} ({parent.op})")
            if mark == 0:
                state[parent.id] = 1
                stack_.append((parent, iter(parent.parents)))
                break
        else:
            stack_.pop()
            state[node.id] = 2
            order.append(node)
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
    """Propagate adjoints from a scalar ``loss``.

    Sets ``.adjoint`` on every node reached and returns ``{name: gradient}``
    for ``params``; parameters the loss does not reach get zeros.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    adjoints: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for node in reversed(order):
        g = adjoints.pop(node.id, None)
        if g is None:
            continue
        node.adjoint = g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = adjoints.get(parent.id)
            adjoints[parent.id] = pg if prev is None else prev + pg
    if params is None:
        return {}
    out = {}
    reached = {n.id for n in order}
    for name, p in params.items():
        if p.id in reached and p.adjoint is not None:
            out[name] = p.adjoint
        else:
            out[name] = np.zeros_like(p.value)
        p.adjoint = None
    return out


def gradient_errors(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
) -> dict[str, float]:
    """Per-parameter relative error between backward() and central differences.

    The error for one parameter tensor is ``max|analytic - numeric|`` divided
    by ``max(max|analytic|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = backward(f(), params)
    errors = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        numeric = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f().value)
            flat[i] = orig - eps
            lo = float(f().value)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError(f"non-finite loss while perturbing {name}[{i}]")
            numeric[i] = (hi - lo) / (2 * eps)
        a = analytic[name].reshape(-1)
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite analytic gradient for {name}")
        scale = max(float(np.max(np.abs(a))) if a.size else 0.0, 1e-8)
        errors[name] = float(np.max(np.abs(a - numeric))) / scale if a.size else 0.0
    return errors


def finite_difference_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5) -> float:
    """Max relative gradient error over ``params``; see :func:`gradient_errors`."""
    errs = gradient_errors(f, params, eps)
    return max(errs.values()) if errs else 0.0
