"""Minimal define-by-run reverse-mode autodiff over float64 numpy arrays.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
``Tensor.backward`` walks the graph once in reverse topological order and
accumulates gradients additively, so fan-out is handled by summation.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor", "ShapeError", "NumericError", "no_grad", "is_grad_enabled",
    "add", "sub", "mul", "div", "neg", "matmul", "relu", "sigmoid", "exp", "log",
    "clamp_min", "softmax", "sum_", "mean", "reshape", "transpose", "swapaxes",
    "concat", "conv1d", "layer_norm", "dropout", "scaled_dot_product", "gradcheck",
]

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # --- construction of graph nodes
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    # --- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # --- operators
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

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

    # --- autodiff
    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from this scalar."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DTYPE)
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def neg(a) -> Tensor:
    a = _t(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._make(out, (a, b), backward, "div")


def relu(x) -> Tensor:
    x = _t(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = _t(x)
    y = expit(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(x) -> Tensor:
    x = _t(x)
    y = np.exp(x.data)
    return Tensor._make(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = _t(x)
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp_min(x, lo: float) -> Tensor:
    """max(x, lo); gradient passes only where x >= lo."""
    x = _t(x)
    keep = x.data >= lo
    return Tensor._make(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,), "clamp_min")


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = _t(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax input contains NaN")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), backward, "softmax")


# ------------------------------------------------------------- reductions


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), backward, "mean")


# ------------------------------------------------------------- structural


def reshape(x, shape) -> Tensor:
    x = _t(x)
    return Tensor._make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _t(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x, a: int = -1, b: int = -2) -> Tensor:
    x = _t(x)
    return Tensor._make(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_t(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._make(out, ts, backward, "concat")


# ------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; both operands need ndim >= 2."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    flat = b.ndim == 2 and a.ndim > 2
    if flat:
        # one large GEMM instead of a batched loop
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*a.shape[:-1], b.shape[-1])
    else:
        out = a.data @ b.data

    def backward(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._make(out, (a, b), backward, "matmul")


def scaled_dot_product(q, k) -> Tensor:
    """Attention scores ``q @ k^T / sqrt(d)`` over the last two axes."""
    q, k = _t(q), _t(k)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key depth differs: {q.shape} vs {k.shape}")
    scale = 1.0 / math.sqrt(q.shape[-1])
    out = (q.data @ np.swapaxes(k.data, -1, -2)) * scale

    def backward(g):
        gq = (g @ k.data) * scale
        gk = (np.swapaxes(g, -1, -2) @ q.data) * scale
        return _unbroadcast(gq, q.shape), _unbroadcast(gk, k.shape)

    return Tensor._make(out, (q, k), backward, "sdp")


def conv1d(x, kernel, bias=None, channels_last: bool = False) -> Tensor:
    """Stride-1 1D convolution with zero 'same' padding.

    ``x`` is (..., C_in, T), or (..., T, C_in) with ``channels_last``; the
    kernel is (C_out, C_in, k) with odd k. Output length equals T.
    """
    x, kernel = _t(x), _t(kernel)
    if kernel.ndim != 3:
        raise ShapeError(f"kernel must be (C_out, C_in, k), got {kernel.shape}")
    c_out, c_in, k = kernel.shape
    if k % 2 == 0:
        raise ValueError(f"kernel length must be odd for same padding, got {k}")
    xd = x.data if channels_last else np.swapaxes(x.data, -1, -2)  # (..., T, C_in)
    if xd.ndim < 2 or xd.shape[-1] != c_in:
        raise ShapeError(f"input channels {x.shape} do not match kernel {kernel.shape}")
    T = xd.shape[-2]
    p = k // 2
    pad = [(0, 0)] * (xd.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(xd, pad)
    cols = sliding_window_view(xp, k, axis=-2)  # (..., T, C_in, k)
    lead = cols.shape[:-3]
    cols2 = cols.reshape(-1, c_in * k)
    w2 = kernel.data.reshape(c_out, c_in * k)
    out = cols2 @ w2.T
    parents = [x, kernel]
    if bias is not None:
        bias = _t(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias must be ({c_out},), got {bias.shape}")
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(*lead, T, c_out)
    if not channels_last:
        out = np.swapaxes(out, -1, -2)

    def backward(g):
        gcl = g if channels_last else np.swapaxes(g, -1, -2)
        g2 = gcl.reshape(-1, c_out)
        gw = (g2.T @ cols2).reshape(kernel.shape)
        gcols = (g2 @ w2).reshape(*lead, T, c_in, k)
        gxp = np.zeros(xp.shape)
        for j in range(k):
            gxp[..., j : j + T, :] += gcols[..., j]
        gx = gxp[..., p : p + T, :]
        if not channels_last:
            gx = np.swapaxes(gx, -1, -2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return Tensor._make(out, parents, backward, "conv1d")


# ------------------------------------------------------------ normalization


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean, unit variance (no affine part)."""
    x = _t(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor._make(y, (x,), backward, "layer_norm")


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: identity at inference, scaled Bernoulli mask at train time."""
    x = _t(x)
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ------------------------------------------------------------ verification


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-5, coords=None,
              floor: float = 1e-6, joint: bool = False) -> float:
    """Largest norm-wise relative error between backprop and central differences.

    ``fn`` must rebuild the scalar output from the current ``inputs``. With
    ``coords`` (a list of index arrays, one per input) only those flat
    entries are perturbed. ``floor`` bounds the denominator from below so an
    input whose true gradient is exactly zero (e.g. the key bias of an
    attention layer) is compared absolutely instead of amplifying rounding noise.
    With ``joint`` the error is taken over all inputs concatenated (one
    number per layer) rather than the worst input.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    pairs = []
    for i, t in enumerate(inputs):
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        idx = np.arange(t.size) if coords is None else np.asarray(coords[i])
        flat = t.data.reshape(-1)
        numeric = np.empty(len(idx))
        with no_grad():
            for n, j in enumerate(idx):
                orig = flat[j]
                flat[j] = orig + eps
                fp = fn().item()
                flat[j] = orig - eps
                fm = fn().item()
                flat[j] = orig
                numeric[n] = (fp - fm) / (2 * eps)
        a = analytic[idx]
        if joint:
            pairs.append((a, numeric))
            continue
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), floor)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
    if joint:
        a = np.concatenate([p[0] for p in pairs])
        numeric = np.concatenate([p[1] for p in pairs])
        return float(np.linalg.norm(a - numeric) / max(np.linalg.norm(a), np.linalg.norm(numeric), floor))
    return worst
