"""Parameterized building blocks: Conv1D, multi-head self-attention, squeeze-and-excitation, dense head.

All layers work channels-last on (batch, T, C) or (T, C) tensors.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterable

import numpy as np

from . import tensor as F
from .tensor import ShapeError, Tensor


class EmptySequenceError(ShapeError):
    pass


class ConfigError(ValueError):
    pass


def as_sequence(x) -> Tensor:
    """Wrap ``x`` as a Tensor, rejecting a zero-length time axis (second to last)."""
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim >= 2 and arr.shape[-2] == 0:
        raise EmptySequenceError("empty sequence (T = 0)")
    return Tensor(arr)


# ---------------------------------------------------------- initialization


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[1], shape[0]
    if len(shape) == 3:  # (C_out, C_in, k)
        return shape[1] * shape[2], shape[0] * shape[2]
    raise ValueError(f"no fan rule for shape {shape}")


def init_params(seed, layer_spec: Iterable[tuple[str, tuple[int, ...], str]]) -> "OrderedDict[str, Tensor]":
    """Build parameters from ``(name, shape, kind)`` triples, in order.

    ``kind`` is ``weight`` (Glorot uniform, bound sqrt(6 / (fan_in + fan_out))),
    ``bias`` (zeros) or ``gain`` (ones). One generator is drawn from in triple
    order, so the result is a pure function of ``seed`` and ``layer_spec``.
    """
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape, kind in layer_spec:
        if any(d <= 0 for d in shape):
            raise ConfigError(f"{name}: non-positive dimension in {shape}")
        if kind == "weight":
            fan_in, fan_out = _fans(shape)
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "bias":
            data = np.zeros(shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            raise ConfigError(f"{name}: unknown parameter kind {kind!r}")
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


class Layer:
    """A named group of parameter tensors with a forward function."""

    def __init__(self, params: "OrderedDict[str, Tensor]"):
        self.params = params

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __getitem__(self, key: str) -> Tensor:
        return self.params[key]


# ------------------------------------------------------------------ conv


class Conv1dLayer(Layer):
    """ReLU(conv1d(x)) with zero same-padding; kernel stored as (C_out, C_in, k)."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, seed=0, params=None):
        if k % 2 == 0:
            raise ConfigError(f"kernel length must be odd, got {k}")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        super().__init__(params if params is not None else init_params(seed, self.spec_for(c_in, c_out, k)))

    @staticmethod
    def spec_for(c_in, c_out, k):
        return [("kernel", (c_out, c_in, k), "weight"), ("bias", (c_out,), "bias")]

    def __call__(self, x: Tensor) -> Tensor:
        return F.relu(F.conv1d(x, self.params["kernel"], self.params["bias"], channels_last=True))


# ------------------------------------------------------------- attention


class MultiHeadAttentionBlock(Layer):
    """Self-attention with residual + layer norm: ``LayerNorm(x + Dropout(MHA(x)))``.

    Per-head projections are fused per role: ``wq`` is (C, h*d_k) and head i
    uses columns ``i*d_k:(i+1)*d_k``. With ``residual_norm=False`` the block
    returns ``Dropout(MHA(x))`` and has no layer-norm parameters.
    """

    def __init__(self, channels=128, n_heads=4, key_dim=32, dropout=0.2, residual_norm=True, eps=1e-5, seed=0, params=None):
        self.channels, self.n_heads, self.key_dim = channels, n_heads, key_dim
        self.dropout = dropout
        self.residual_norm = residual_norm
        self.eps = eps
        self.last_attention: np.ndarray | None = None
        spec = self.spec_for(channels, n_heads, key_dim, residual_norm)
        super().__init__(params if params is not None else init_params(seed, spec))

    @staticmethod
    def spec_for(channels, n_heads, key_dim, residual_norm=True):
        hd = n_heads * key_dim
        spec = [
            ("wq", (channels, hd), "weight"), ("bq", (hd,), "bias"),
            ("wk", (channels, hd), "weight"), ("bk", (hd,), "bias"),
            ("wv", (channels, hd), "weight"), ("bv", (hd,), "bias"),
            ("wo", (hd, channels), "weight"), ("bo", (channels,), "bias"),
        ]
        if residual_norm:
            spec += [("ln_gain", (channels,), "gain"), ("ln_bias", (channels,), "bias")]
        return spec

    def _split_heads(self, t: Tensor) -> Tensor:
        *lead, T, _ = t.shape
        t = F.reshape(t, (*lead, T, self.n_heads, self.key_dim))
        n = len(lead)
        return F.transpose(t, tuple(range(n)) + (n + 1, n, n + 2))  # (..., h, T, d)

    def _merge_heads(self, t: Tensor) -> Tensor:
        *lead, h, T, d = t.shape
        n = len(lead)
        t = F.transpose(t, tuple(range(n)) + (n + 1, n, n + 2))  # (..., T, h, d)
        return F.reshape(t, (*lead, T, h * d))

    def attend(self, x: Tensor) -> Tensor:
        """Concat(head_1..head_h) W^O, before dropout and residual."""
        p = self.params
        q = self._split_heads(x @ p["wq"] + p["bq"])
        k = self._split_heads(x @ p["wk"] + p["bk"])
        v = self._split_heads(x @ p["wv"] + p["bv"])
        weights = F.softmax(F.scaled_dot_product(q, k), axis=-1)
        self.last_attention = weights.data
        heads = weights @ v
        return self._merge_heads(heads) @ p["wo"] + p["bo"]

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ShapeError(f"attention block expects {self.channels} channels, got {x.shape}")
        y = F.dropout(self.attend(x), self.dropout, rng, training)
        if not self.residual_norm:
            return y
        z = F.layer_norm(x + y, self.eps)
        return z * self.params["ln_gain"] + self.params["ln_bias"]


def attention_forward(block: MultiHeadAttentionBlock, x, training: bool = False, rng=None) -> Tensor:
    return block(as_sequence(x), training, rng)


# ------------------------------------------------------ squeeze-excitation


class SqueezeExcitationBlock(Layer):
    """Channel gating ``s = sigmoid(W2 relu(W1 z + b1) + b2)`` with ``z`` the temporal mean."""

    def __init__(self, channels=128, reduction=16, seed=0, params=None):
        if channels % reduction:
            raise ConfigError(f"channels {channels} not divisible by reduction {reduction}")
        self.channels, self.reduction = channels, reduction
        self.last_gates: np.ndarray | None = None
        super().__init__(params if params is not None else init_params(seed, self.spec_for(channels, reduction)))

    @staticmethod
    def spec_for(channels, reduction):
        hidden = channels // reduction
        return [
            ("w1", (hidden, channels), "weight"), ("b1", (hidden,), "bias"),
            ("w2", (channels, hidden), "weight"), ("b2", (channels,), "bias"),
        ]

    def gates(self, u: Tensor) -> Tensor:
        """Gate vector shaped (..., 1, C) so it broadcasts over time."""
        p = self.params
        z = F.mean(u, axis=-2, keepdims=True)  # squeeze over time
        e = F.relu(z @ F.transpose(p["w1"]) + p["b1"])
        return F.sigmoid(e @ F.transpose(p["w2"]) + p["b2"])

    def __call__(self, u: Tensor) -> Tensor:
        if u.shape[-1] != self.channels:
            raise ShapeError(f"SE block expects {self.channels} channels, got {u.shape}")
        s = self.gates(u)
        self.last_gates = s.data[..., 0, :]
        return u * s


def se_forward(block: SqueezeExcitationBlock, u) -> Tensor:
    return block(as_sequence(u))


# ------------------------------------------------------------------ head


def global_average_pool(x) -> Tensor:
    """Per-channel mean over the time axis (second to last)."""
    x = as_sequence(x)
    if x.ndim < 2:
        raise ShapeError(f"pooling needs a (..., T, C) input, got {x.shape}")
    return F.mean(x, axis=-2)


class DenseHead(Layer):
    """Logits ``h W^T + b`` with W stored as (n_out, C)."""

    def __init__(self, channels=128, n_out=3, seed=0, params=None):
        self.channels, self.n_out = channels, n_out
        super().__init__(params if params is not None else init_params(seed, self.spec_for(channels, n_out)))

    @staticmethod
    def spec_for(channels, n_out):
        return [("w", (n_out, channels), "weight"), ("b", (n_out,), "bias")]

    def __call__(self, h: Tensor) -> Tensor:
        if h.ndim == 1:
            return F.reshape(self(F.reshape(h, (1, -1))), (self.n_out,))
        return h @ F.transpose(self.params["w"]) + self.params["b"]
