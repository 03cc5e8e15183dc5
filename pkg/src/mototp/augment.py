"""Collision prediction with and without a time-pressure feature appended to the telemetry.

Three input configurations share splits and seeds:

* ``baseline``  -- telemetry only
* ``predicted`` -- telemetry plus the upstream MTPS class probabilities
* ``oracle``    -- telemetry plus the one-hot ground-truth TP label

The downstream classifier is the MTPS trunk with a two-class head.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import normalize
from .layers import ConfigError
from .model import MtpsConfig, MTPSModel, load_checkpoint
from .training import Dataset, TrainConfig, hash_seed, prepare_dataset, train

logger = logging.getLogger(__name__)

MODES = ("baseline", "predicted", "oracle")
N_TP = 3


def _one_hot(labels, k: int = N_TP) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (k,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def augment_features(x, tp=None, mode: str = "baseline", hard: bool = False) -> np.ndarray:
    """Append a TP encoding to every timestep of ``x`` ((T, F) or (B, T, F)).

    ``tp`` is an integer label per window for ``oracle`` and a probability
    triple (HTP, LTP, NTP order) per window for ``predicted``. With ``hard``
    the predicted triple is replaced by the one-hot of its argmax.
    """
    x = np.asarray(x, dtype=np.float64)
    if mode == "baseline":
        return x
    if mode not in MODES:
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    if tp is None:
        raise ConfigError(f"mode {mode!r} needs a TP source")
    single = x.ndim == 2
    xb = x[None] if single else x
    if mode == "oracle":
        enc = _one_hot(np.atleast_1d(tp))
    else:
        enc = np.atleast_2d(np.asarray(tp, dtype=np.float64))
        if enc.shape[-1] != N_TP:
            raise ConfigError(f"predicted TP must be a probability triple, got shape {enc.shape}")
        if hard:
            enc = _one_hot(enc.argmax(axis=-1))
    if enc.shape[0] != xb.shape[0]:
        raise ValueError(f"{enc.shape[0]} TP encodings for {xb.shape[0]} windows")
    tiled = np.broadcast_to(enc[:, None, :], (xb.shape[0], xb.shape[1], N_TP))
    out = np.concatenate([xb, tiled], axis=-1)
    return out[0] if single else out


@dataclass
class AugmentConfig:
    modes: tuple = MODES
    seeds: tuple = (0, 1, 2)
    upstream: object = None  # MTPSModel, checkpoint path, dict seed -> MTPSModel, or None
    train_upstream: bool = False  # fit an upstream model on each seed's training split
    hard: bool = False
    window: int = 64
    stride: int = 32
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_epochs=20))
    upstream_train: TrainConfig | None = None
    downstream: MtpsConfig = field(default_factory=lambda: MtpsConfig(n_classes=2))
    shuffle_oracle: bool = False  # negative control: permute the appended labels across windows

    def __post_init__(self):
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigError(f"unknown modes {bad}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if "predicted" in self.modes and self.upstream is None and not self.train_upstream:
            raise ConfigError("predicted mode requires an upstream MTPS checkpoint")


@dataclass
class AugmentResult:
    accuracies: dict  # mode -> per-seed accuracies
    seeds: tuple

    def mean(self, mode: str) -> float:
        return float(np.mean(self.accuracies[mode])) if mode in self.accuracies else math.nan

    @property
    def a_baseline(self) -> float:
        return self.mean("baseline")

    @property
    def a_mtps(self) -> float:
        return self.mean("predicted")

    @property
    def a_oracle(self) -> float:
        return self.mean("oracle")

    @property
    def delta_max(self) -> float:
        return self.a_oracle - self.a_baseline

    @property
    def delta_mtps(self) -> float:
        return self.a_mtps - self.a_baseline

    @property
    def epsilon(self) -> float:
        return self.a_oracle - self.a_mtps

    @property
    def eta(self) -> float:
        """Percent of the oracle gain recovered; NaN when the oracle gains nothing."""
        return benefit_ratio(self.a_baseline, self.a_mtps, self.a_oracle)

    @property
    def diagnostic(self) -> str:
        if not all(m in self.accuracies for m in MODES):
            return "eta needs all three modes"
        if not self.delta_max > 0:
            return f"eta undefined: oracle gain {self.delta_max:+.4f} is not positive"
        return ""

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "seed", "accuracy"])
        for mode in MODES:
            if mode not in self.accuracies:
                continue
            for s, a in zip(self.seeds, self.accuracies[mode]):
                w.writerow([mode, s, f"{a:.6f}"])
            w.writerow([mode, "mean", f"{self.mean(mode):.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        labels = {
            "baseline": "Baseline f(X)",
            "predicted": "MTPS-predicted f(X + TP_hat)",
            "oracle": "Oracle f(X + TP)",
        }
        lines = [f"{'configuration':<32}{'accuracy (%)':>14}"]
        for mode in MODES:
            if mode in self.accuracies:
                lines.append(f"{labels[mode]:<32}{100 * self.mean(mode):>14.2f}")
        if all(m in self.accuracies for m in MODES):
            lines += [
                "",
                f"delta_max  = {100 * self.delta_max:+.2f} points",
                f"delta_mtps = {100 * self.delta_mtps:+.2f} points",
                f"epsilon    = {100 * self.epsilon:+.2f} points",
                "eta        = " + ("undefined (" + self.diagnostic + ")" if self.diagnostic else f"{self.eta:.2f}%"),
            ]
        return "\n".join(lines) + "\n"


def benefit_ratio(a_baseline: float, a_mtps: float, a_oracle: float) -> float:
    dmax = a_oracle - a_baseline
    if not dmax > 0:
        return math.nan
    return (a_mtps - a_baseline) / dmax * 100.0


def _resolve_upstream(upstream):
    if upstream is None or isinstance(upstream, (MTPSModel, dict)):
        return upstream, None
    model, header = load_checkpoint(upstream)
    stats = header.get("extra", {}).get("normalization")
    if stats is not None:
        from .data import NormalizationStats

        stats = NormalizationStats.from_dict(stats)
    return model, stats


def _accuracy(model: MTPSModel, X, y) -> float:
    return float(np.mean(model.predict(X) == y))


def run_experiment(config: AugmentConfig, sessions=None, datasets=None) -> AugmentResult:
    """Train one downstream collision classifier per (mode, seed) and score it on the test split.

    Either ``sessions`` (rides carrying collision labels) or a ``datasets``
    mapping seed -> :class:`Dataset` must be supplied.
    """
    upstream, upstream_stats = _resolve_upstream(config.upstream)
    acc: dict = {m: [] for m in MODES if m in config.modes}
    for seed in config.seeds:
        ds: Dataset = datasets[seed] if datasets is not None else prepare_dataset(
            sessions, config.window, config.stride, seed=seed
        )
        if ds.collision_train is None or ds.collision_test is None:
            raise ConfigError("corpus lacks collision labels")
        probs = {}
        if "predicted" in acc:
            up = upstream.get(seed) if isinstance(upstream, dict) else upstream
            if up is None and not config.train_upstream:
                raise ConfigError(f"no upstream model for seed {seed}")
            if config.train_upstream:
                up_cfg = replace(config.upstream_train or config.train, seed=seed)
                up, _ = train(up_cfg, ds.X_train, ds.y_train, ds.X_val, ds.y_val)
            for part in ("train", "val", "test"):
                X = getattr(ds, f"X_{part}")
                if upstream_stats is not None and not config.train_upstream:
                    X = normalize(_denormalize(X, ds.stats), upstream_stats)
                probs[part] = up.predict_proba(X)
        for mode in acc:
            Z = {}
            for part in ("train", "val", "test"):
                X = getattr(ds, f"X_{part}")
                y = getattr(ds, f"y_{part}")
                if mode == "oracle":
                    tp = y
                    if config.shuffle_oracle:
                        tp = np.random.default_rng([hash_seed(seed), 7]).permutation(y)
                    Z[part] = augment_features(X, tp, "oracle")
                elif mode == "predicted":
                    Z[part] = augment_features(X, probs[part], "predicted", config.hard)
                else:
                    Z[part] = X
            dcfg = replace(config.downstream, n_features=Z["train"].shape[-1], n_classes=2)
            model = MTPSModel(dcfg, seed=[hash_seed(seed), 11])
            tcfg = replace(config.train, seed=seed)
            model, _ = train(tcfg, Z["train"], ds.collision_train, Z["val"], ds.collision_val, model=model)
            a = _accuracy(model, Z["test"], ds.collision_test)
            logger.info("augment seed %s mode %s accuracy %.4f", seed, mode, a)
            acc[mode].append(a)
    return AugmentResult(acc, tuple(config.seeds))


def _denormalize(X, stats):
    return X * stats.scale + stats.shift


def write_result(result: AugmentResult, out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    (d / "augment.csv").write_text(result.to_csv(), encoding="utf-8")
    (d / "augment_summary.txt").write_text(result.to_text(), encoding="utf-8")
