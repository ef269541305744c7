"""Reverse-mode automatic differentiation over dense numpy arrays.

Every tensor operation used anywhere in the library lives here. Operations
record a tape node when gradients are enabled and at least one operand
requires them; ``backward`` walks the tape in reverse topological order and
accumulates (never overwrites) gradients into each participating tensor.

Matmul and convolution forward passes also report their floating point
operation counts into any active :func:`count_flops` context, which is what
the cost benchmark uses for measured FLOPs.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

_grad_enabled: bool = True
_flop_stack: list["FlopCounter"] = []


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class FlopCounter:
    """Accumulates multiply-add FLOPs (2 per multiply-add) of matmul/conv."""

    __slots__ = ("total",)

    def __init__(self):
        self.total = 0


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _flop_stack.append(counter)
    try:
        yield counter
    finally:
        _flop_stack.remove(counter)


def _add_flops(n: int) -> None:
    for counter in _flop_stack:
        counter.total += n


class Tensor:
    """Dense n-dimensional array with optional gradient tape participation.

    ``data`` is immutable by convention once the tensor has been consumed by
    an operation; ``grad`` is the only field mutated afterwards, and only by
    accumulation during a backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backprop = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DomainError(f"item() requires a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


@dataclass
class Parameter:
    """A named trainable tensor; names are unique within a model."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        self.tensor.requires_grad = True


class ParamRegistry:
    """Creates and tracks the named parameters of one model instance."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self.params: dict[str, Parameter] = {}

    def create(self, name: str, array) -> Tensor:
        if name in self.params:
            raise ShapeError(f"duplicate parameter name '{name}'")
        t = Tensor(np.asarray(array, dtype=self.dtype), requires_grad=True)
        self.params[name] = Parameter(name, t)
        return t

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params.values()]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.tensor.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError(
                f"parameter name mismatch; missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(state[name], dtype=self.dtype)
            if arr.shape != p.tensor.data.shape:
                raise ShapeError(
                    f"parameter '{name}' has shape {arr.shape}, expected {p.tensor.data.shape}")
            p.tensor.data = arr


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce a (tensor, scalar) pair without promoting the tensor's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.data.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.data.dtype), b
    return as_tensor(a), as_tensor(b)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce ``grad`` back to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _node(data: np.ndarray, parents: tuple, backprop) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backprop = backprop
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = _unbroadcast(np.asarray(g), t.data.shape)
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse-mode accumulation from a scalar loss into every reachable leaf."""
    if loss.data.size != 1:
        raise DomainError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backprop is not None and node.grad is not None:
            node._backprop(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data + b.data

    def backprop(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(out_data, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data - b.data

    def backprop(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(out_data, (a, b), backprop)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backprop(g):
        _accumulate(a, -g)

    return _node(-a.data, (a,), backprop)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data * b.data

    def backprop(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(out_data, (a, b), backprop)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out_data = a.data / b.data

    def backprop(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * a.data / (b.data * b.data))

    return _node(out_data, (a, b), backprop)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backprop(g):
        _accumulate(a, g * out_data)

    return _node(out_data, (a,), backprop)


def log(a) -> Tensor:
    a = as_tensor(a)

    def backprop(g):
        _accumulate(a, g / a.data)

    return _node(np.log(a.data), (a,), backprop)


def clamp(a, lo=None, hi=None) -> Tensor:
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    pass_mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        pass_mask &= a.data >= lo
    if hi is not None:
        pass_mask &= a.data <= hi

    def backprop(g):
        _accumulate(a, g * pass_mask)

    return _node(out_data, (a,), backprop)


# ---------------------------------------------------------------------------
# activations


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out_data = out_data.astype(x.dtype, copy=False)

    def backprop(g):
        _accumulate(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backprop)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backprop(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), backprop)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU with the tanh approximation (closed-form derivative)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    half_1pt = 0.5 * (1.0 + t)
    out_data = x * half_1pt

    def backprop(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * x2)
        dx = half_1pt + 0.5 * x * (1.0 - t * t) * d_inner
        _accumulate(a, g * dx)

    return _node(out_data, (a,), backprop)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backprop(g):
        _accumulate(a, g * mask)

    return _node(a.data * mask, (a,), backprop)


# ---------------------------------------------------------------------------
# reductions and normalizers


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backprop(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape))

    return _node(out_data, (a,), backprop)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        count = a.data.shape[axis]

    def backprop(g):
        if axis is None:
            _accumulate(a, np.broadcast_to(g / count, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g / count, a.data.shape))

    return _node(out_data, (a,), backprop)


def softmax(a, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax on ``axis``; outputs sum to one along it."""
    if temperature <= 0:
        raise DomainError(f"softmax temperature must be positive, got {temperature}")
    a = as_tensor(a)
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backprop(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        _accumulate(a, (g - inner) * p / temperature)

    return _node(p, (a,), backprop)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backprop(g):
        _accumulate(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

    return _node(ls, (a,), backprop)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then
    apply the elementwise affine ``gain * x + bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} "
            f"do not match feature width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data + bias.data

    def backprop(g):
        _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            term = gx - gx.mean(axis=-1, keepdims=True) \
                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, term * inv)

    return _node(out_data, (x, gain, bias), backprop)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)
    m, k, p = a.shape[-2], a.shape[-1], b.shape[-1]
    batch = int(np.prod(out_data.shape[:-2], dtype=np.int64)) if out_data.ndim > 2 else 1
    _add_flops(2 * batch * m * k * p)

    def backprop(g):
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            _accumulate(b, np.matmul(np.swapaxes(a.data, -1, -2), g))

    return _node(out_data, (a, b), backprop)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def backprop(g):
        _accumulate(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), backprop)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def backprop(g):
        _accumulate(a, g.transpose(inverse))

    return _node(a.data.transpose(axes), (a,), backprop)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backprop(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(idx)])

    return _node(out_data, tuple(tensors), backprop)


def take_rows(a, index) -> Tensor:
    """Select rows along axis 0 with an integer array (embedding lookup)."""
    a = as_tensor(a)
    index = np.asarray(index)

    def backprop(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, index, g)
            _accumulate(a, buf)

    return _node(a.data[index], (a,), backprop)


def depthwise_conv1d(x, kernel) -> Tensor:
    """Per-channel 1-D convolution with zero same-padding.

    ``x`` has shape (..., n, d) and ``kernel`` (k, d) with odd k; there is no
    cross-channel mixing, output length equals input length.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    k, d = kernel.data.shape
    if k % 2 == 0:
        raise DomainError(f"depthwise_conv1d kernel size must be odd, got {k}")
    if x.data.shape[-1] != d:
        raise ShapeError(f"conv channels {x.data.shape[-1]} != kernel channels {d}")
    n = x.data.shape[-2]
    pad = k // 2
    pad_spec = [(0, 0)] * (x.data.ndim - 2) + [(pad, pad), (0, 0)]
    xp = np.pad(x.data, pad_spec)
    out_data = np.zeros_like(x.data)
    for j in range(k):
        out_data = out_data + kernel.data[j] * xp[..., j:j + n, :]
    batch = int(np.prod(x.data.shape[:-2], dtype=np.int64)) if x.data.ndim > 2 else 1
    _add_flops(2 * batch * n * d * k)

    def backprop(g):
        if kernel.requires_grad:
            dk = np.empty_like(kernel.data)
            lead = tuple(range(g.ndim - 1))
            for j in range(k):
                dk[j] = (g * xp[..., j:j + n, :]).sum(axis=lead)
            _accumulate(kernel, dk)
        if x.requires_grad:
            gp = np.pad(g, pad_spec)
            dx = np.zeros_like(x.data)
            for j in range(k):
                dx = dx + kernel.data[j] * gp[..., (k - 1 - j):(k - 1 - j) + n, :]
            _accumulate(x, dx)

    return _node(out_data, (x, kernel), backprop)


def dropout(x, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout drawing its mask from the explicit ``rng`` stream."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = 1.0 / (1.0 - rate)
    out_data = x.data * keep * scale

    def backprop(g):
        _accumulate(x, g * keep * scale)

    return _node(out_data, (x,), backprop)


# ---------------------------------------------------------------------------
# composite building blocks


@dataclass
class GruParams:
    """Update/reset/candidate projections of a GRU cell."""

    w_z: Tensor
    u_z: Tensor
    b_z: Tensor
    w_r: Tensor
    u_r: Tensor
    b_r: Tensor
    w_n: Tensor
    u_n: Tensor
    b_n: Tensor


def gru_cell(x, h, p: GruParams) -> Tensor:
    """One GRU step.

    z = sigmoid(x W_z + h U_z + b_z), r likewise, candidate
    n = tanh(x W_n + r * (h U_n) + b_n), output (1 - z) * n + z * h.
    Accepts any leading batch shape; a bare vector is treated as one row.
    """
    x, h = as_tensor(x), as_tensor(h)
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
        h = reshape(h, (1, -1))
    if x.shape[-1] != p.w_z.shape[0] or h.shape[-1] != p.u_z.shape[0]:
        raise ShapeError(
            f"gru_cell input widths {x.shape[-1]}/{h.shape[-1]} do not match "
            f"parameters {p.w_z.shape}/{p.u_z.shape}")
    z = sigmoid(add(add(matmul(x, p.w_z), matmul(h, p.u_z)), p.b_z))
    r = sigmoid(add(add(matmul(x, p.w_r), matmul(h, p.u_r)), p.b_r))
    n = tanh(add(add(matmul(x, p.w_n), mul(r, matmul(h, p.u_n))), p.b_n))
    out = add(mul(sub(1.0, z), n), mul(z, h))
    if squeeze:
        out = reshape(out, (-1,))
    return out


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def mlp2(x, p: MlpParams) -> Tensor:
    """Two-layer MLP with a GELU hidden activation."""
    return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2)


# ---------------------------------------------------------------------------
# gradient checking


def finite_difference(f, arrays, step: float = 1e-5):
    """Central-difference gradients of scalar ``f`` wrt a list of f64 arrays.

    The arrays are perturbed in place, so they must be the same objects the
    closure ``f`` reads from, and they must already be 64-bit.
    """
    grads = []
    for arr in arrays:
        if arr.dtype != np.float64:
            raise DomainError("finite differences require float64 arrays")
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def check_gradients(f, tensors, step: float = 1e-5, rel_tol: float = 1e-4,
                    abs_floor: float = 1e-6) -> float:
    """Compare autodiff and central-difference gradients for scalar ``f``.

    ``f`` rebuilds the graph from the (64-bit) tensors on each call. Returns
    the worst relative error and raises AssertionError beyond ``rel_tol``.
    """
    for t in tensors:
        t.zero_grad()
    loss = f()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for t in tensors]
    numeric = finite_difference(lambda: float(f().data), [t.data for t in tensors], step)
    worst = 0.0
    for t, a, n in zip(tensors, analytic, numeric):
        denom = np.maximum(np.abs(n), abs_floor)
        rel = np.abs(a - n) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
        if worst > rel_tol:
            idx = np.unravel_index(np.argmax(rel), rel.shape)
            raise AssertionError(
                f"gradient mismatch at {idx} of tensor shape {t.data.shape}: "
                f"autodiff {a[idx]:.8g} vs numeric {n[idx]:.8g} (rel {rel[idx]:.3g})")
    return worst
