"""Minimal reverse-mode autodiff over numpy arrays.

Every op builds a node that records its parents and a closure that pushes
the upstream gradient back to them.  ``Tensor.backward`` walks the nodes
reachable from the loss in reverse creation order, which is the reverse of
forward execution order, visiting each exactly once.
"""
from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LOG_EPS = 1e-12
PROB_EPS = 1e-7
MASK_VALUE = -1e9

_default_dtype = np.float32
_grad_enabled = True
_debug = False
_node_ids = itertools.count()


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors (e.g. float64 for gradchecks)."""
    global _default_dtype
    old, _default_dtype = _default_dtype, np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = old


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = old


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Check every op output for NaN/Inf."""
    global _debug
    old, _debug = _debug, enabled
    try:
        yield
    finally:
        _debug = old


@dataclass
class RngState:
    """Counter-based RNG: each draw uses Philox keyed by ``seed`` at ``counter``."""

    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        gen = np.random.Generator(np.random.Philox(key=self.seed, counter=self.counter))
        self.counter += 1
        return gen

    def fork(self, stream: int) -> "RngState":
        return RngState(seed=(self.seed * 1_000_003 + stream + 1) % 2**63, counter=0)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_node_ids)
        self.name = name

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _reachable(self)
        grads: dict[int, np.ndarray] = {self._id: np.ones_like(self.data)}
        for node in order:
            g = grads.pop(node._id, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g.astype(node.grad.dtype, copy=False)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg

    # -- operator sugar -----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

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


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _reachable(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen:
            continue
        seen[t._id] = t
        stack.extend(p for p in t._parents if _tracks(p))
    return sorted(seen.values(), key=lambda t: t._id, reverse=True)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype in (np.float32, np.float64):
        return Tensor(x)
    return Tensor(np.asarray(x, dtype=_default_dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by forward op")
    out = Tensor(data)
    if _grad_enabled and any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"operand shapes {a.shape} and {b.shape} do not broadcast") from None
    return a, b


# -- elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: add, sub, mul, sigmoid, exp, log, relu."""
    table = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "exp": exp,
             "log": log, "relu": relu, "gelu": gelu}
    if op not in table:
        raise ValueError(f"unknown elementwise op {op!r}")
    return table[op](*args)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    """Natural log with input clamped at ``LOG_EPS``; clamped entries get zero gradient."""
    x = as_tensor(x)
    xc = np.maximum(x.data, LOG_EPS)
    return _make(np.log(xc), (x,), lambda g: (np.where(x.data > LOG_EPS, g / xc, 0.0),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
    y = (x.data * cdf).astype(x.dtype)
    return _make(y, (x,), lambda g: (g * (cdf + x.data * pdf),))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    y = np.sqrt(x.data)
    return _make(y, (x,), lambda g: (g * 0.5 / y,))


# -- reductions and shape ops -----------------------------------------------
def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(y, dtype=x.dtype), (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    y = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(y, (x,), lambda g: (np.transpose(g, inv),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    y = np.broadcast_to(x.data, shape).copy()
    return _make(y, (x,), lambda g: (_unbroadcast(g, x.shape),))


def getitem(x, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    x = as_tensor(x)
    y = x.data[index]

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(y, copy=True), (x,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ts_nonempty = [t for t in ts if t.data.size > 0] or ts[:1]
    ref = ts_nonempty[0].shape
    ax = axis % len(ref)
    for t in ts_nonempty:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"cannot concat shapes {[t.shape for t in ts_nonempty]} on axis {axis}")
    y = np.concatenate([t.data for t in ts_nonempty], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in ts_nonempty])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(y, ts_nonempty, backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules on leading dimensions."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    y = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(y, (a, b), backward)


# -- normalizers ----------------------------------------------------------------
def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        n = x.shape[-1]
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _make(y.astype(x.dtype), (x, gamma, beta), backward)


def dropout(x, rate, rng: RngState | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or not training.

    ``rate`` may be an array broadcastable to ``x`` (e.g. one rate per batch row).
    """
    r = np.asarray(rate, dtype=np.float64)
    if np.any(r < 0.0) or np.any(r >= 1.0):
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or not np.any(r > 0.0):
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an RngState")
    keep = rng.generator().random(x.shape) >= r
    mask = (keep / (1.0 - r)).astype(x.dtype)
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


# -- gradient checking ------------------------------------------------------------
def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    epsilon: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    return_worst: bool = False,
):
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` closes over ``params`` and must be deterministic; it is evaluated twice
    up front and a mismatch raises ``RuntimeError``.  Returns the max over checked
    entries of ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.  With
    ``max_entries`` only that many randomly chosen entries per parameter are probed.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    again = f()
    if not np.array_equal(loss.data, again.data):
        raise RuntimeError("function under check is not deterministic")
    loss.backward()
    rng = rng or np.random.default_rng(0)
    worst, worst_at = 0.0, None
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        analytic = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + epsilon
            hi = float(f().data)
            flat[i] = old - epsilon
            lo = float(f().data)
            flat[i] = old
            numeric = (hi - lo) / (2 * epsilon)
            a = float(analytic[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if worst_at is None or err > worst:
                worst, worst_at = err, (p.name or f"param{pi}", int(i), a, numeric)
    if return_worst:
        return worst, worst_at
    return worst
