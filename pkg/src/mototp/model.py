"""The MTPS network: Conv1D x2 -> MHA x2 -> SE -> GAP -> dense softmax head.

Also holds the loss, complexity accounting and the binary checkpoint format.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as F
from .layers import (
    ConfigError,
    Conv1dLayer,
    DenseHead,
    EmptySequenceError,
    MultiHeadAttentionBlock,
    SqueezeExcitationBlock,
    global_average_pool,
)
from .schema import N_FEATURES, SCHEMA_HASH, SchemaError
from .tensor import Tensor

VARIANTS = ("full", "no_se", "no_attention", "no_residual_norm", "conv_only")

CHECKPOINT_MAGIC = b"MTPS"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<4sHI")  # magic, version, header length


@dataclass(frozen=True)
class MtpsConfig:
    n_features: int = N_FEATURES
    n_classes: int = 3
    conv_filters: tuple[int, ...] = (64, 128)
    kernel_size: int = 3
    n_heads: int = 4
    key_dim: int = 32
    n_attention_blocks: int = 2
    se_reduction: int = 16
    dropout: float = 0.2
    use_attention: bool = True
    use_se: bool = True
    use_residual_norm: bool = True
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_features < 1 or self.n_classes < 2:
            raise ConfigError("need at least one feature and two classes")
        if not self.conv_filters:
            raise ConfigError("at least one convolution layer is required")
        if self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        object.__setattr__(self, "conv_filters", tuple(int(c) for c in self.conv_filters))

    @property
    def channels(self) -> int:
        return self.conv_filters[-1]

    @classmethod
    def variant(cls, name: str, **overrides) -> MtpsConfig:
        """Structural ablations of the full model."""
        flags = {
            "full": {},
            "no_se": {"use_se": False},
            "no_attention": {"use_attention": False},
            "no_residual_norm": {"use_residual_norm": False},
            "conv_only": {"use_attention": False, "use_se": False},
        }
        if name not in flags:
            raise ConfigError(f"unknown variant {name!r}; choose from {VARIANTS}")
        return cls(**{**flags[name], **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MtpsConfig:
        d = dict(d)
        d["conv_filters"] = tuple(d["conv_filters"])
        return cls(**d)


class MTPSModel:
    """Forward inference over (T, F) or (B, T, F) windows; output is (..., n_classes) probabilities."""

    def __init__(self, config: MtpsConfig | None = None, seed=0):
        self.config = config = config or MtpsConfig()
        ss = np.random.SeedSequence(seed)
        n_layers = len(config.conv_filters) + config.n_attention_blocks + 2
        seeds = iter(ss.spawn(n_layers))
        self.convs: list[Conv1dLayer] = []
        c_in = config.n_features
        for c_out in config.conv_filters:
            self.convs.append(Conv1dLayer(c_in, c_out, config.kernel_size, seed=next(seeds)))
            c_in = c_out
        C = config.channels
        self.attention: list[MultiHeadAttentionBlock] = []
        for _ in range(config.n_attention_blocks):
            s = next(seeds)
            if config.use_attention:
                self.attention.append(
                    MultiHeadAttentionBlock(
                        C, config.n_heads, config.key_dim, config.dropout,
                        residual_norm=config.use_residual_norm, eps=config.layer_norm_eps, seed=s,
                    )
                )
        s = next(seeds)
        self.se = SqueezeExcitationBlock(C, config.se_reduction, seed=s) if config.use_se else None
        self.head = DenseHead(C, config.n_classes, seed=next(seeds))

    # ---------------------------------------------------------- parameters

    def named_layers(self):
        for i, conv in enumerate(self.convs):
            yield f"conv{i + 1}", conv
        for i, block in enumerate(self.attention):
            yield f"mha{i + 1}", block
        if self.se is not None:
            yield "se", self.se
        yield "head", self.head

    @property
    def params(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for lname, layer in self.named_layers():
            for pname, t in layer.params.items():
                out[f"{lname}.{pname}"] = t
        return out

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def get_weights(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data.copy()) for k, t in self.params.items())

    def set_weights(self, weights) -> None:
        params = self.params
        if set(weights) != set(params):
            raise ShapeMismatch(f"parameter names differ: {sorted(set(weights) ^ set(params))}")
        for k, t in params.items():
            w = np.asarray(weights[k], dtype=np.float64)
            if w.shape != t.shape:
                raise ShapeMismatch(f"{k}: expected {t.shape}, got {w.shape}")
            t.data = w.copy()

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # ------------------------------------------------------------- forward

    def _check_input(self, x) -> Tensor:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if arr.ndim not in (2, 3):
            raise F.ShapeError(f"expected (T, F) or (B, T, F) input, got shape {arr.shape}")
        if arr.shape[-1] != self.config.n_features:
            raise SchemaError(f"expected {self.config.n_features} features, got {arr.shape[-1]}")
        if arr.shape[-2] == 0:
            raise EmptySequenceError("empty sequence (T = 0)")
        if arr.shape[0] == 0:
            raise F.ShapeError("empty batch")
        return x if isinstance(x, Tensor) else Tensor(arr)

    def features(self, x, training: bool = False, rng=None) -> Tensor:
        """Pooled trunk representation h, shape (..., C)."""
        h = self._check_input(x)
        for conv in self.convs:
            h = conv(h)
        for block in self.attention:
            h = block(h, training, rng)
        if self.se is not None:
            h = self.se(h)
        return global_average_pool(h)

    def logits(self, x, training: bool = False, rng=None) -> Tensor:
        return self.head(self.features(x, training, rng))

    def forward(self, x, training: bool = False, rng=None) -> Tensor:
        return F.softmax(self.logits(x, training, rng), axis=-1)

    __call__ = forward

    def predict_proba(self, X, batch_size: int = 256) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        self._check_input(X[:1])
        out = []
        with F.no_grad():
            for i in range(0, X.shape[0], batch_size):
                out.append(self.forward(X[i : i + batch_size]).data)
        P = np.concatenate(out, axis=0)
        return P[0] if single else P

    def predict(self, X, batch_size: int = 256) -> np.ndarray:
        return np.argmax(self.predict_proba(X, batch_size), axis=-1)

    def predict_states(self, X, batch_size: int = 256):
        from .states import StateProbabilities

        P = np.atleast_2d(self.predict_proba(X, batch_size))
        return [StateProbabilities.from_class_vector(p) for p in P]

    def copy(self) -> MTPSModel:
        twin = MTPSModel(self.config, seed=0)
        twin.set_weights(self.get_weights())
        return twin


class ShapeMismatch(SchemaError):
    """Checkpoint or weight set does not fit the model architecture."""


# ------------------------------------------------------------------- loss


def cross_entropy(probs, labels, eps: float = 1e-12) -> Tensor:
    """Mean categorical cross-entropy of (N, K) probabilities against integer labels."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim == 1:
        probs = F.reshape(probs, (1, -1))
    n, k = probs.shape
    if labels.shape[0] == 0:
        raise ValueError("cross-entropy of an empty batch")
    if labels.shape[0] != n:
        raise ValueError(f"batch sizes differ: {n} predictions, {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels outside 0..{k - 1}")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    ll = F.log(F.clamp_min(probs, eps)) * onehot
    return F.sum_(ll) * (-1.0 / n)


# ------------------------------------------------------------- accounting


def _mac_breakdown(model: MTPSModel, T: int) -> "OrderedDict[str, int]":
    cfg = model.config
    macs: OrderedDict[str, int] = OrderedDict()
    for name, layer in model.named_layers():
        if isinstance(layer, Conv1dLayer):
            macs[name] = T * layer.c_in * layer.k * layer.c_out
        elif isinstance(layer, MultiHeadAttentionBlock):
            C, hd = layer.channels, layer.n_heads * layer.key_dim
            proj = 3 * T * C * hd + T * hd * C
            scores = 2 * layer.n_heads * T * T * layer.key_dim  # QK^T and AV
            macs[name] = proj + scores
        elif isinstance(layer, SqueezeExcitationBlock):
            hidden = layer.channels // layer.reduction
            macs[name] = 2 * layer.channels * hidden
        elif isinstance(layer, DenseHead):
            macs[name] = layer.channels * layer.n_out
    return macs


def count_complexity(model: MTPSModel, T: int = 1) -> dict:
    """Parameter tally, forward multiply-accumulates at window length ``T``, and byte sizes.

    ``serialized_bytes`` is the exact size of an fp64 checkpoint.
    ``training_state_bytes`` is the size of a resumable checkpoint holding
    fp32 weights plus both fp32 Adam moment buffers (12 bytes per parameter
    plus header), the convention common deep-learning frameworks use when
    saving a model together with its optimizer.
    """
    if T < 1:
        raise EmptySequenceError("T must be >= 1")
    macs = _mac_breakdown(model, T)
    total = sum(macs.values())
    return {
        "parameter_count": model.n_parameters(),
        "flops": total,
        "flops_2x": 2 * total,
        "macs_by_layer": dict(macs),
        "serialized_bytes": checkpoint_size(model),
        "training_state_bytes": checkpoint_size(model, dtype="<f4", with_optimizer=True),
    }


# ------------------------------------------------------------- checkpoint


def _header(model: MTPSModel, dtype: str, blocks: list[tuple[str, tuple]], extra: dict | None) -> bytes:
    header = {
        "config": model.config.to_dict(),
        "schema_hash": SCHEMA_HASH,
        "dtype": dtype,
        "blocks": [[name, list(shape)] for name, shape in blocks],
        "extra": extra or {},
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(fh, model: MTPSModel, extra: dict | None = None, dtype: str = "<f8", optimizer_state=None) -> None:
    """Serialize: magic, version, JSON header, then little-endian parameter blocks.

    With ``optimizer_state`` (an object with ``m`` and ``v`` dicts) the Adam
    moments follow the weights as blocks named ``adam_m.<param>`` / ``adam_v.<param>``.
    """
    if dtype not in ("<f8", "<f4"):
        raise ValueError(f"unsupported dtype {dtype!r}")
    params = model.params
    blocks = [(k, t.shape, t.data) for k, t in params.items()]
    if optimizer_state is not None:
        for role in ("m", "v"):
            store = getattr(optimizer_state, role)
            blocks += [(f"adam_{role}.{k}", params[k].shape, np.asarray(store[k])) for k in params]
    head = _header(model, dtype, [(n, s) for n, s, _ in blocks], extra)
    fh.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)))
    fh.write(head)
    for _, _, data in blocks:
        fh.write(np.ascontiguousarray(data, dtype=dtype).tobytes())


def save_checkpoint(path, model: MTPSModel, extra: dict | None = None, **kwargs) -> int:
    buf = io.BytesIO()
    write_checkpoint(buf, model, extra, **kwargs)
    Path(path).write_bytes(buf.getvalue())
    return buf.tell()


class _ZeroMoments:
    def __init__(self, params):
        self.m = {k: np.zeros(t.shape) for k, t in params.items()}
        self.v = self.m


def checkpoint_size(model: MTPSModel, dtype: str = "<f8", with_optimizer: bool = False, extra=None) -> int:
    buf = io.BytesIO()
    state = _ZeroMoments(model.params) if with_optimizer else None
    write_checkpoint(buf, model, extra, dtype=dtype, optimizer_state=state)
    return buf.tell()


def read_checkpoint(data: bytes, check_schema: bool = True) -> tuple[MTPSModel, dict]:
    """Rebuild a model from checkpoint bytes; returns ``(model, header)``."""
    if len(data) < _PREAMBLE.size:
        raise ShapeMismatch("checkpoint truncated")
    magic, version, hlen = _PREAMBLE.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ShapeMismatch(f"not an MTPS checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ShapeMismatch(f"unsupported checkpoint version {version}")
    start = _PREAMBLE.size
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    if check_schema and header.get("schema_hash") != SCHEMA_HASH:
        raise SchemaError("checkpoint feature-schema hash does not match this build's schema")
    model = MTPSModel(MtpsConfig.from_dict(header["config"]), seed=0)
    expected = model.params
    dtype = np.dtype(header["dtype"])
    offset = start + hlen
    weights: dict[str, np.ndarray] = {}
    for name, shape in header["blocks"]:
        shape = tuple(shape)
        n = int(np.prod(shape)) * dtype.itemsize
        if offset + n > len(data):
            raise ShapeMismatch(f"checkpoint truncated inside block {name}")
        arr = np.frombuffer(data, dtype=dtype, count=n // dtype.itemsize, offset=offset).reshape(shape)
        offset += n
        if name.startswith("adam_"):
            continue
        if name not in expected:
            raise ShapeMismatch(f"unexpected block {name}")
        if shape != expected[name].shape:
            raise ShapeMismatch(f"{name}: header shape {shape} does not match architecture {expected[name].shape}")
        weights[name] = arr.astype(np.float64)
    if offset != len(data):
        raise ShapeMismatch(f"{len(data) - offset} trailing bytes after the last block")
    missing = set(expected) - set(weights)
    if missing:
        raise ShapeMismatch(f"checkpoint lacks blocks {sorted(missing)}")
    model.set_weights(weights)
    return model, header


def load_checkpoint(path, check_schema: bool = True) -> tuple[MTPSModel, dict]:
    return read_checkpoint(Path(path).read_bytes(), check_schema)


def with_variant(config: MtpsConfig, name: str) -> MtpsConfig:
    """Apply an ablation to an existing config, keeping its other settings."""
    base = MtpsConfig.variant(name)
    return replace(config, use_attention=base.use_attention, use_se=base.use_se,
                   use_residual_norm=base.use_residual_norm)
