"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op records a :class:`Node` on the output tensor. Calling
:func:`backward` on a scalar walks those nodes in reverse topological order and
accumulates gradients into leaf tensors that have ``requires_grad`` set.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "REGISTERED_OPS",
    "Tensor",
    "Node",
    "NonFiniteError",
    "tensor",
    "no_grad",
    "checked",
    "set_checked",
    "is_grad_enabled",
    "backward",
    "topological_order",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "gelu",
    "softplus",
    "sigmoid",
    "layer_norm",
    "embedding_lookup",
    "log_softmax",
    "masked_softmax",
    "take_last",
    "reshape",
    "transpose",
    "tsum",
    "mean",
    "finite_diff_check",
]

LN_EPS = 1e-5


class NonFiniteError(FloatingPointError):
    """Raised in checked mode when an op produces NaN or Inf."""


class _State(threading.local):
    def __init__(self) -> None:
        self.grad_enabled = True
        self.checked = False


_state = _State()


def is_grad_enabled() -> bool:
    return _state.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording for the current thread."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_checked(flag: bool) -> None:
    _state.checked = bool(flag)


@contextlib.contextmanager
def checked(flag: bool = True):
    """Scan every op output for NaN/Inf while active."""
    prev = _state.checked
    _state.checked = flag
    try:
        yield
    finally:
        _state.checked = prev


class Node:
    """One recorded operation: its inputs and the rule mapping the output
    gradient to input gradients (``None`` for inputs that need none)."""

    __slots__ = ("inputs", "rule", "op")

    def __init__(self, inputs: Sequence["Tensor"], rule: Callable, op: str):
        self.inputs = tuple(inputs)
        self.rule = rule
        self.op = op


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# names of every primitive that records a backward rule
REGISTERED_OPS = ("add", "sub", "mul", "div", "neg", "exp", "log", "gelu", "sigmoid", "softplus", "matmul",
                  "reshape", "transpose", "sum", "getitem", "layer_norm", "embedding", "log_softmax",
                  "masked_softmax", "take_last")


def _result(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    if op not in REGISTERED_OPS:
        raise ValueError(f"unregistered op {op!r}")
    if _state.checked and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(inputs, rule, op)
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


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), rule, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(a.data / b.data, (a, b), rule, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def rule(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return _result(out, (a,), rule, "gelu")


def _sigmoid_np(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    # the branch keeps exp() from overflowing; sigmoid(0) is exactly 0.5
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_values(x) -> np.ndarray:
    """Stable logistic function on plain arrays (no graph)."""
    return _sigmoid_np(x)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = _sigmoid_np(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed without overflow."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _result(out, (a,), lambda g: (g * _sigmoid_np(a.data),), "softplus")


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        if b.ndim == 2:
            k = a.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            ga = g @ b.data.T
            return ga, gb
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), rule, "matmul")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    src = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), rule, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)
    return tsum(a, axis, keepdims) / float(count)


def _getitem(a: Tensor, idx) -> Tensor:
    src = a.shape

    def rule(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.data[idx], (a,), rule, "getitem")


# ---------------------------------------------------------------- NN ops


def layer_norm(x, gamma, beta, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis; constant rows map to ``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def rule(g):
        gg = _unbroadcast(g * xhat, gamma.shape)
        gb = _unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, gg, gb

    return _result(out, (x, gamma, beta), rule, "layer_norm")


def embedding_lookup(weight, ids) -> Tensor:
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    vocab = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding index out of range for vocabulary of {vocab}")

    def rule(g):
        full = np.zeros(weight.shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result(weight.data[ids], (weight,), rule, "embedding")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), rule, "log_softmax")


def masked_softmax(x, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis where ``mask`` is False contributes zero
    probability. Every row must keep at least one entry."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    filled = np.where(mask, x.data, -np.inf)
    shifted = filled - filled.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), rule, "masked_softmax")


def take_last(x, ids) -> Tensor:
    """``out[..., i] = x[..., i, ids[..., i]]``: pick one entry per row of
    the last axis."""
    x = _as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ValueError(f"index shape {ids.shape} does not match {x.shape[:-1]}")
    expanded = ids[..., None]
    out = np.take_along_axis(x.data, expanded, axis=-1)[..., 0]

    def rule(g):
        full = np.zeros(x.shape)
        np.put_along_axis(full, expanded, g[..., None], axis=-1)
        return (full,)

    return _result(out, (x,), rule, "take_last")


# ---------------------------------------------------------------- backward


def topological_order(root: Tensor) -> list[Tensor]:
    """Recorded tensors reachable from ``root``, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf
    with ``requires_grad``. Grads add onto existing values."""
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for t in reversed(topological_order(root)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t.node.inputs, t.node.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi


# ---------------------------------------------------------------- checking


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
    atol: float = 1e-12,
) -> float:
    """Max over coordinates of ``|analytic-numeric| / max(atol, |analytic|+|numeric|)``.

    The numeric derivative uses the fourth-order five-point stencil
    ``(8[f(x+h)-f(x-h)] - [f(x+2h)-f(x-2h)]) / 12h``, whose truncation error is
    O(h^4); with ``h=1e-3`` both truncation and round-off stay near 1e-12.
    ``f`` closes over ``params`` and is re-evaluated after each in-place
    perturbation. ``max_coords`` samples a random subset of coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NonFiniteError("function value is not finite")
    backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[k] for k in sorted(pick)]

    worst = 0.0
    with no_grad():
        for i, j in coords:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            vals = []
            for step in (eps, -eps, 2 * eps, -2 * eps):
                flat[j] = orig + step
                vals.append(f().item())
            flat[j] = orig
            if not np.isfinite(vals).all():
                raise NonFiniteError("function value is not finite")
            numeric = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * eps)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(atol, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst
