"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation whose inputs require gradients is recorded on the tape at
creation time.  ``backward`` replays the recorded rules in reverse recording
order and writes gradients only onto the parameters it is asked for.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_order = itertools.count()
_state = threading.local()

LAYER_NORM_EPS = 1e-6


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_rule", "_order", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._rule: Callable | None = None
        self._order = next(_order)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._rule = rule
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), rule)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,))


def tabs(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    c = np.sqrt(2.0 / np.pi)
    xd = x.data
    x2 = xd * xd
    th = np.tanh(c * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + th)

    def rule(g):
        du = c * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * du),)

    return _make(out, (x,), rule)


# ---------------------------------------------------------------- reductions


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def rule(g):
        full = np.zeros_like(x.data)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make(x.data[idx], (x,), rule)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def concat_tokens(p: Tensor, e: Tensor) -> Tensor:
    """Stack prompt rows on top of token rows: ``[p, e]`` along the token axis."""
    if p.shape[-1] != e.shape[-1]:
        raise DimensionError(f"token width mismatch: {p.shape[-1]} vs {e.shape[-1]}")
    if p.shape[-2] == 0:
        return e
    if p.ndim < e.ndim:
        p = broadcast_to(p, e.shape[:-2] + p.shape[-2:])
    return concat([p, e], axis=-2)


def drop_prompt_rows(x: Tensor, n_prompt: int) -> Tensor:
    """Remove the first ``n_prompt`` token rows."""
    if n_prompt == 0:
        return x
    return getitem(x, (Ellipsis, slice(n_prompt, None), slice(None)))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product ``a @ b`` over the last two axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if a.ndim > 2 and b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), rule)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise each row to zero mean and unit variance, then apply ``gain``/``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] < 2:
        raise DimensionError("layer_norm needs at least two features")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def rule(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = _unbroadcast(g * xhat, gain.shape)
        if bias.requires_grad:
            gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), rule)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for each listed parameter.

    Only the listed parameters receive ``.grad``; every other tensor on the tape
    is left untouched.  With ``params=None`` all reachable leaves that require
    gradients are used.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)

    if params is None:
        targets = [t for t in nodes.values() if t._rule is None]
    else:
        targets = list(params)
    target_ids = {id(t) for t in targets}

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in sorted(nodes.values(), key=lambda t: t._order, reverse=True):
        g = grads.pop(id(node), None) if id(node) not in target_ids else grads.get(id(node))
        if g is None or node._rule is None:
            continue
        for parent, pg in zip(node._parents, node._rule(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg

    for t in targets:
        g = grads.get(id(t))
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g.copy() if t.grad is None else t.grad + g
