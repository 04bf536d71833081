"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array.  Every differentiable op records its
parents and a closure that maps the output gradient to input gradients;
:func:`backward` replays those closures in reverse topological order.

Two precisions are supported (float32 for training, float64 for gradient
and equivalence checks).  Ops keep the dtype of their inputs.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Incompatible tensor shapes."""


class ConfigurationError(ValueError):
    """Invalid layer or model configuration."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(FloatingPointError):
    """NaN or Inf produced while checking is enabled."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_NUMERICS = False
_ids = itertools.count()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"unsupported precision {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def check_numerics(enabled: bool = True):
    """Raise :class:`NumericError` naming the node that first produces NaN/Inf."""
    global _CHECK_NUMERICS
    old = _CHECK_NUMERICS
    _CHECK_NUMERICS = enabled
    try:
        yield
    finally:
        _CHECK_NUMERICS = old


# ---------------------------------------------------------------------------
# operation counting (used by the complexity model's instrumented oracle)


@dataclass
class OpCounter:
    """Counts multiply-accumulates and 1-op elementwise work."""

    macs: int = 0
    ops: int = 0
    by_kind: dict = field(default_factory=dict)

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.ops

    def add(self, kind: str, macs: int = 0, ops: int = 0) -> None:
        self.macs += int(macs)
        self.ops += int(ops)
        m, o = self.by_kind.get(kind, (0, 0))
        self.by_kind[kind] = (m + int(macs), o + int(ops))


_COUNTERS: list[OpCounter] = []


@contextlib.contextmanager
def count_ops():
    """Context manager yielding an :class:`OpCounter` fed by executed ops."""
    counter = OpCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


def record(kind: str, macs: int = 0, ops: int = 0) -> None:
    if _COUNTING_PAUSED:
        return
    for c in _COUNTERS:
        c.add(kind, macs, ops)


_COUNTING_PAUSED = False


@contextlib.contextmanager
def uncounted():
    """Suspend op counting (parameter-only transforms do not scale with input)."""
    global _COUNTING_PAUSED
    old = _COUNTING_PAUSED
    _COUNTING_PAUSED = True
    try:
        yield
    finally:
        _COUNTING_PAUSED = old


# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")   # keeps 0-d arrays 0-d
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.id = next(_ids)
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._bad_item()

    def _bad_item(self):
        raise ContractError(f"item() on tensor of shape {self.shape}")

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def backward(self, grad=None) -> None:
        backward(self, grad)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.id = next(_ids)
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward = backward_fn if needs else None
    if _CHECK_NUMERICS and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value produced by node {out.id} ({op})")
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# graph


@dataclass
class OpGraph:
    """Topologically ordered view of the graph feeding a tensor."""

    nodes: list[Tensor]
    leaves: list[Tensor]

    @classmethod
    def from_output(cls, out: Tensor) -> OpGraph:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.id not in seen:
                    stack.append((p, False))
        leaves = [n for n in order if n._backward is None and n.requires_grad]
        return cls(order, leaves)


def backward(loss: Tensor, grad=None) -> OpGraph:
    """Fill ``.grad`` of every tensor requiring gradients that feeds ``loss``."""
    if grad is None:
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    graph = OpGraph.from_output(loss)
    grads: dict[int, np.ndarray] = {loss.id: grad}
    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if _CHECK_NUMERICS and not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient at node {node.id} ({node.op})")
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    return graph


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data + b.data
    record("add", ops=out.size)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data - b.data
    record("add", ops=out.size)
    sa, sb = a.shape, b.shape
    return _make(out, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data * b.data
    record("mul", ops=out.size)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    out = a.data / b.data
    record("div", ops=out.size)

    def bw(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    record("pow", ops=out.size)
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    record("exp", ops=out.size)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    record("log", ops=out.size)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    record("activation", ops=out.size)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = _sigmoid_np(a.data)
    out = a.data * s
    record("activation", ops=out.size)
    return _make(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
    record("activation", ops=out.size)
    return _make(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    record("activation", ops=out.size)
    return _make(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def gelu(a: Tensor) -> Tensor:
    # tanh approximation
    x = a.data
    c = np.sqrt(2.0 / np.pi)
    inner = c * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    record("activation", ops=out.size)

    def bw(g):
        dinner = c * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return _make(out, (a,), bw, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)
    record("softmax", ops=out.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))
    record("reduce", ops=a.size - out.size)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    old = a.shape
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _make(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = np.ascontiguousarray(a.data[idx])
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), bw, "getitem")


def take(a: Tensor, index: np.ndarray, axis: int) -> Tensor:
    """Gather along ``axis``; ``index`` must be a permutation-like int array."""
    index = np.asarray(index)
    out = np.take(a.data, index, axis=axis)
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        ax = axis % len(shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, index, np.moveaxis(g, ax, 0))
        return (full,)

    return _make(out, (a,), bw, "take")


def concat(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(ts), bw, "concat")


def stack(ts: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in ts], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(out, tuple(ts), bw, "stack")


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (numpy semantics)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    record("matmul", macs=out.size * a.shape[-1])

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _make(out, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight (+ bias)`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d == 0:
        raise DimensionError("layer_norm over an empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layer_norm params {gamma.shape}/{beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data
    record("norm", ops=out.size)

    def bw(g):
        gg = unbroadcast(g * xhat, gamma.shape)
        gb = unbroadcast(g, beta.shape)
        gx_hat = g * gamma.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw, "layer_norm")


def _dwconv_forward(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    # x: [..., H, W, C] channels-last; k: [kh, kw, C]
    kh, kw = k.shape[:2]
    ph, pw = kh // 2, kw // 2
    H, W = x.shape[-3], x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 3) + [(ph, ph), (pw, pw), (0, 0)]
    xp = np.pad(x, pad)
    out = np.zeros_like(x)
    for i in range(kh):
        for j in range(kw):
            out += xp[..., i:i + H, j:j + W, :] * k[i, j]
    return out


def depthwise_conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
                     channels_last: bool = False) -> Tensor:
    """Per-channel 2-D correlation with zero 'same' padding.

    ``x`` is [N, C, H, W] (or [N, H, W, C] with ``channels_last``);
    ``kernels`` is [C, k, k] with odd k.
    """
    if kernels.ndim != 3 or kernels.shape[1] != kernels.shape[2]:
        raise ConfigurationError(f"depthwise kernels must be [C, k, k], got {kernels.shape}")
    C, kh, _ = kernels.shape
    if kh % 2 == 0:
        raise ConfigurationError(f"depthwise kernel size must be odd, got {kh}")
    c_axis = -1 if channels_last else -3
    if x.ndim < 3 or x.shape[c_axis] != C:
        raise DimensionError(f"kernel channels {C} do not match input {x.shape}")
    xd = x.data if channels_last else np.moveaxis(x.data, -3, -1)
    kd = np.ascontiguousarray(kernels.data.transpose(1, 2, 0))
    out = _dwconv_forward(xd, kd)
    if bias is not None:
        out = out + bias.data
    record("dwconv", macs=out.size * kh * kh, ops=out.size if bias is not None else 0)
    H, W = xd.shape[-3], xd.shape[-2]
    p = kh // 2

    def bw(g):
        gcl = g if channels_last else np.moveaxis(g, -3, -1)
        # input grad: correlation with the flipped kernel
        gx = _dwconv_forward(gcl, kd[::-1, ::-1])
        pad = [(0, 0)] * (xd.ndim - 3) + [(p, p), (p, p), (0, 0)]
        xp = np.pad(xd, pad)
        gk = np.empty_like(kd)
        lead = tuple(range(xd.ndim - 1))
        for i in range(kh):
            for j in range(kh):
                gk[i, j] = (xp[..., i:i + H, j:j + W, :] * gcl).sum(axis=lead)
        gk = gk.transpose(2, 0, 1)
        if not channels_last:
            gx = np.moveaxis(gx, -1, -3)
        gb = gcl.reshape(-1, C).sum(axis=0) if bias is not None else None
        return (gx, gk, gb) if bias is not None else (gx, gk)

    if not channels_last:
        out = np.ascontiguousarray(np.moveaxis(out, -1, -3))
    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return _make(out, parents, bw, "depthwise_conv2d")


def parameters_of(obj) -> Iterable[Tensor]:
    """Yield trainable tensors found in nested dicts/lists."""
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield obj
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from parameters_of(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from parameters_of(v)
