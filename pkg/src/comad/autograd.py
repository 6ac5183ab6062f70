"""Minimal dense tensor with reverse-mode automatic differentiation.

Tensors wrap a numpy array. Every differentiable operation returns a new
tensor that remembers its parents and a closure mapping the output gradient
to gradients for each parent. :func:`backward` builds a :class:`Tape` (the
topologically ordered list of recorded nodes reachable from the loss) and
walks it once in reverse.

Only float32 and float64 are supported.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, NumericError

DTYPES = {"f32": np.float32, "f64": np.float64}

LAYER_NORM_EPS = 1e-6
COSINE_EPS = 1e-8

_state = threading.local()
_CHECK_FINITE = True


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def resolve_dtype(dtype) -> np.dtype:
    if dtype is None:
        return np.dtype(np.float32)
    if isinstance(dtype, str):
        try:
            return np.dtype(DTYPES[dtype])
        except KeyError:
            raise ContractError(f"unsupported dtype {dtype!r}; expected one of {sorted(DTYPES)}")
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dt}")
    return dt


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(resolve_dtype(dtype), copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    # a finite sum implies finite entries; only an overflowing sum needs the full scan
    if _CHECK_FINITE and not np.isfinite(np.add.reduce(data, axis=None)) and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
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


# ---------------------------------------------------------------------------
# Tape and backward
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    """Recorded operations reachable from one output, in topological order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        if not self.nodes:
            return
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if _CHECK_FINITE and not np.isfinite(pg).all():
                    raise NumericError(f"non-finite gradient in backward of {node.op}")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        self.nodes.clear()


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor with requires_grad=True")
    Tape.from_output(loss).backward(np.ones_like(loss.data))


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _make(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(np.sqrt(2.0 / np.pi))
    k = x.dtype.type(0.044715)
    x2 = x * x
    t = np.tanh(c * x * (1 + k * x2))
    out = 0.5 * x * (1 + t)

    def bw(g):
        du = c * (1 + 3 * k * x2)
        return (g * (0.5 * (1 + t) + 0.5 * x * (1 - t * t) * du),)

    return _make(out, (a,), bw, "gelu")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


# ---------------------------------------------------------------------------
# Reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis, keepdims) * (1.0 / count)


def cast(a: Tensor, dtype) -> Tensor:
    dt = resolve_dtype(dtype)
    if a.dtype == dt:
        return a
    return _make(a.data.astype(dt), (a,), lambda g: (g.astype(a.dtype),), "cast")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g) if _has_fancy(idx) else _assign_add(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw, "getitem")


def _has_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _assign_add(full, idx, g):
    full[idx] += g


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, bw, "stack")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes with broadcast batch dims."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear input width {x.shape[-1]} does not match weight {weight.shape} (expects [out, in])"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ x.data.reshape(-1, x.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, bw, "linear")


# ---------------------------------------------------------------------------
# Normalization, softmax, similarity, divergence
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm affine params {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        g2 = g.reshape(-1, d)
        gg = (g2 * xhat.reshape(-1, d)).sum(axis=0) if gamma.requires_grad else None
        gb = g2.sum(axis=0) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ConfigError(f"softmax temperature must be > 0, got {temperature}")


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)

    return _make(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        p = np.exp(out)
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _make(out, (x,), bw, "log_softmax")


def clamped_norm(x: Tensor, eps: float = COSINE_EPS, axis: int = -1) -> Tensor:
    """``max(||x||, eps)`` over ``axis`` (keepdims), with zero gradient in the clamped region."""
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    active = n > eps
    out = np.where(active, n, eps).astype(x.dtype)

    def bw(g):
        safe = np.where(active, n, 1.0)
        return (np.where(active, g * x.data / safe, 0.0).astype(x.dtype),)

    return _make(out, (x,), bw, "clamped_norm")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """``<a, b> / (max(|a|, eps) * max(|b|, eps))`` over the last axis."""
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"cosine_similarity last axes differ: {a.shape} vs {b.shape}")
    dot = tsum(a * b, axis=-1)
    na = reshape(clamped_norm(a, eps), a.shape[:-1])
    nb = reshape(clamped_norm(b, eps), b.shape[:-1])
    return dot / (na * nb)


def kl_from_logits(p_logits: Tensor, q_logits: Tensor, axis: int = -1) -> Tensor:
    """KL(softmax(p) || softmax(q)) along ``axis``, through log-softmax on both sides."""
    if p_logits.shape != q_logits.shape:
        raise DimensionError(f"KL operands differ in shape: {p_logits.shape} vs {q_logits.shape}")
    lp = log_softmax(p_logits, axis)
    lq = log_softmax(q_logits, axis)
    return tsum(exp(lp) * (lp - lq), axis=axis)


def kl_divergence(p: Tensor, q: Tensor, axis: int = -1, tol: float = 1e-5) -> Tensor:
    """KL(p || q) for explicit probability vectors; ``0 log 0`` is taken as 0."""
    p, q = _pair(p, q)
    if p.shape != q.shape:
        raise DimensionError(f"KL operands differ in shape: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < 0) or not np.allclose(t.data.sum(axis=axis), 1.0, atol=tol, rtol=0):
            raise ContractError(f"{name} is not a probability vector within {tol}")
    if np.any((q.data == 0) & (p.data > 0)):
        raise NumericError("KL is infinite: q has zero mass where p does not")
    pos = p.data > 0
    safe_p = np.where(pos, p.data, 1.0)
    safe_q = np.where(pos, q.data, 1.0)
    log_ratio = np.log(safe_p) - np.log(safe_q)
    out = np.where(pos, p.data * log_ratio, 0.0).sum(axis=axis)

    def bw(g):
        g = np.expand_dims(g, axis)
        gp = np.where(pos, g * (log_ratio + 1.0), 0.0) if p.requires_grad else None
        gq = -g * p.data / np.where(q.data > 0, q.data, 1.0) if q.requires_grad else None
        return gp, gq

    return _make(np.asarray(out, dtype=p.dtype), (p, q), bw, "kl_divergence")


# ---------------------------------------------------------------------------
# Finite-difference gradient check
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    checked: int
    tol: float
    worst_index: tuple[int, ...] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from dominating."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    indices: Iterable[tuple[int, ...]] | None = None,
) -> GradCheckReport:
    """Compare autograd against central differences for the leaf ``x``.

    ``f`` is re-evaluated with ``x.data`` perturbed in place, so it must read
    ``x`` at call time. ``indices`` limits the check to a subset of entries.
    """
    x.grad = None
    loss = f()
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    if indices is None:
        indices = list(np.ndindex(*x.shape))
    indices = list(indices)
    a_vals, n_vals = [], []
    with no_grad():
        for idx in indices:
            orig = x.data[idx]
            x.data[idx] = orig + eps
            fp = float(f().data)
            x.data[idx] = orig - eps
            fm = float(f().data)
            x.data[idx] = orig
            n_vals.append((fp - fm) / (2 * eps))
            a_vals.append(analytic[idx])
    a_arr, n_arr = np.array(a_vals), np.array(n_vals)
    rel = relative_error(a_arr, n_arr)
    worst = int(np.argmax(rel)) if len(rel) else None
    return GradCheckReport(
        max_rel_error=float(rel.max()) if len(rel) else 0.0,
        max_abs_error=float(np.abs(a_arr - n_arr).max()) if len(rel) else 0.0,
        checked=len(indices),
        tol=tol,
        worst_index=indices[worst] if worst is not None else None,
    )
