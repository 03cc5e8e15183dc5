"""Adam training with early stopping and LR-on-plateau, stratified splits, ablations."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as F
from .data import (
    NormalizationStats,
    fit_normalization,
    impute,
    normalize,
    stack_windows,
    window,
)
from .model import VARIANTS, MtpsConfig, MTPSModel, cross_entropy, with_variant
from .tensor import NumericError

logger = logging.getLogger(__name__)


class StratificationError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 50
    early_stop_patience: int = 5
    lr_plateau_patience: int = 3
    lr_factor: float = 0.5
    dropout: float = 0.2
    seed: int = 0
    split_fraction: float = 0.8
    val_fraction: float = 0.1
    min_delta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    variant: str = "full"

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise ValueError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.learning_rate < 0 or not 0 < self.lr_factor <= 1:
            raise ValueError("learning_rate must be >= 0 and lr_factor in (0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")

    def model_config(self, base: MtpsConfig | None = None) -> MtpsConfig:
        base = replace(base or MtpsConfig(), dropout=self.dropout)
        return with_variant(base, self.variant)

    @classmethod
    def from_mapping(cls, values: dict) -> TrainConfig:
        """Build from string values (config files, CLI), coercing to field types."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            t = types[key]
            if t == "int":
                kwargs[key] = int(raw)
            elif t == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------- splitting


def stratified_split(labels, fraction: float = 0.8, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; returns sorted (first, second) index arrays.

    Each class contributes ``round(fraction * n_c)`` items to the first part,
    kept within ``[1, n_c - 1]`` so both parts see every class.
    """
    labels = np.asarray(labels)
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    first, second = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < 2:
            raise StratificationError(f"class {c!r} has {idx.size} sample(s); need at least 2")
        idx = rng.permutation(idx)
        k = int(math.floor(fraction * idx.size + 0.5))
        k = min(max(k, 1), idx.size - 1)
        first.append(idx[:k])
        second.append(idx[k:])
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def stratified_kfold(labels, n_splits: int = 5, seed=0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Folds with per-class round-robin assignment after a seeded shuffle."""
    labels = np.asarray(labels)
    if n_splits < 2:
        raise ValueError("n_splits must be >= 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(labels.shape[0], dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < n_splits:
            raise StratificationError(f"class {c!r} has {idx.size} samples, fewer than {n_splits} folds")
        fold_of[rng.permutation(idx)] = np.arange(idx.size) % n_splits
    return [(np.flatnonzero(fold_of != k), np.flatnonzero(fold_of == k)) for k in range(n_splits)]


def group_labels(labels, groups) -> tuple[np.ndarray, np.ndarray]:
    """Unique groups (in first-seen order) and the label of each; groups must be label-pure."""
    labels, groups = np.asarray(labels), np.asarray(groups)
    uniq, first = np.unique(groups, return_index=True)
    order = np.argsort(first)
    uniq = uniq[order]
    glabels = labels[first[order]]
    for g, lab in zip(uniq, glabels):
        if np.any(labels[groups == g] != lab):
            raise StratificationError(f"group {g!r} mixes labels")
    return uniq, glabels


def stratified_group_split(labels, groups, fraction: float = 0.8, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Stratified split at group level (e.g. rides), so no group straddles both parts."""
    groups = np.asarray(groups)
    uniq, glabels = group_labels(labels, groups)
    gi, _ = stratified_split(glabels, fraction, seed)
    in_first = np.isin(groups, uniq[gi])
    return np.flatnonzero(in_first), np.flatnonzero(~in_first)


# ---------------------------------------------------------------- dataset


@dataclass
class Dataset:
    """Normalized, windowed train/validation/test arrays plus the scaling used."""

    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray
    stats: NormalizationStats
    groups_train: np.ndarray = field(default_factory=lambda: np.zeros(0))
    groups_test: np.ndarray = field(default_factory=lambda: np.zeros(0))
    groups_val: np.ndarray = field(default_factory=lambda: np.zeros(0))
    collision_train: np.ndarray | None = None
    collision_val: np.ndarray | None = None
    collision_test: np.ndarray | None = None

    def summary(self) -> str:
        return (
            f"train {len(self.y_train)} / val {len(self.y_val)} / test {len(self.y_test)} windows, "
            f"T={self.X_train.shape[1]}, features={self.X_train.shape[2]}"
        )


def _windows(sessions, T, stride):
    ws = window(sessions, T, stride)
    X, y = stack_windows(ws)
    groups = np.array([w.ride_id for w in ws])
    coll = np.array([-1 if w.collision is None else w.collision for w in ws], dtype=np.int64)
    return X, y, groups, coll


def prepare_dataset(
    sessions,
    T: int = 64,
    stride: int = 32,
    split_fraction: float = 0.8,
    val_fraction: float = 0.1,
    seed=0,
    norm_mode: str = "schema",
    holdout: bool = True,
) -> Dataset:
    """Impute, split by ride (stratified), window, then fit scaling on training windows only.

    Rides never straddle splits, so overlapping windows of one ride cannot
    leak between training and evaluation. With ``holdout=False`` every ride
    is used for training and the test split is empty.
    """
    import warnings

    sessions = impute(list(sessions))
    if not sessions:
        raise ValueError("no sessions to prepare")
    labels = np.array([s.label for s in sessions])
    ids = np.array([s.ride_id for s in sessions])
    if holdout:
        tr, te = stratified_group_split(labels, ids, split_fraction, seed=[hash_seed(seed), 1])
    else:
        tr, te = np.arange(len(sessions)), np.zeros(0, dtype=np.int64)
    train_s = [sessions[i] for i in tr]
    test_s = [sessions[i] for i in te]
    val_s: list = []
    if val_fraction > 0:
        tl = np.array([s.label for s in train_s])
        tid = np.array([s.ride_id for s in train_s])
        fit_i, val_i = stratified_group_split(tl, tid, 1.0 - val_fraction, seed=[hash_seed(seed), 2])
        val_s = [train_s[i] for i in val_i]
        train_s = [train_s[i] for i in fit_i]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        parts = [_windows(part, T, stride) for part in (train_s, val_s, test_s)]
    (Xtr, ytr, gtr, ctr), (Xva, yva, gva, cva), (Xte, yte, gte, cte) = parts
    if Xtr.shape[0] == 0:
        raise ValueError(f"no training windows: every training ride is shorter than T={T}")
    if Xva.shape[0] == 0:
        Xva = np.zeros((0, T, Xtr.shape[2]))
    if Xte.shape[0] == 0:
        Xte = np.zeros((0, T, Xtr.shape[2]))
    stats = fit_normalization(Xtr, mode=norm_mode)

    def _coll(c):
        return None if (c.size == 0 or np.any(c < 0)) else c

    return Dataset(
        normalize(Xtr, stats), ytr, normalize(Xva, stats), yva, normalize(Xte, stats), yte, stats,
        gtr, gte, gva, _coll(ctr), _coll(cva), _coll(cte),
    )


def hash_seed(seed) -> int:
    """Collapse an int or sequence seed into one 32-bit integer (stable)."""
    return int(np.random.SeedSequence(seed).generate_state(1)[0])


# -------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
        return cls(
            {k: np.zeros(p.shape) for k, p in params.items()},
            {k: np.zeros(p.shape) for k, p in params.items()},
            0, beta1, beta2, eps,
        )


def adam_step(params, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, in place, from each parameter's ``.grad``."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int(np.sum(~np.isfinite(p.grad)))
            raise NumericError(f"non-finite gradient in parameter {name} ({bad} entries)")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# ---------------------------------------------------------------- schedule


class PlateauSchedule:
    """Tracks validation loss; halves the LR after a plateau and signals early stop.

    An epoch improves if ``loss < best - min_delta``. The LR counter resets
    after each reduction; the early-stop counter only resets on improvement.
    """

    def __init__(self, lr: float, plateau_patience=3, stop_patience=5, factor=0.5, min_delta=1e-4):
        self.lr = lr
        self.plateau_patience = plateau_patience
        self.stop_patience = stop_patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.wait = 0
        self.plateau_wait = 0

    def update(self, epoch: int, loss: float) -> tuple[bool, bool, bool]:
        """Returns ``(improved, lr_reduced, stop)`` after ``epoch``."""
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch = loss, epoch
            self.wait = self.plateau_wait = 0
            return True, False, False
        self.wait += 1
        self.plateau_wait += 1
        reduced = False
        if self.plateau_wait >= self.plateau_patience:
            self.lr *= self.factor
            self.plateau_wait = 0
            reduced = True
        return False, reduced, self.wait >= self.stop_patience


# ---------------------------------------------------------------- training


LOG_FIELDS = ("epoch", "train_loss", "val_loss", "val_acc", "lr")


@dataclass
class TrainingLog:
    rows: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def append(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]

    @property
    def best(self) -> dict:
        return next(r for r in self.rows if r["epoch"] == self.best_epoch)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in LOG_FIELDS[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def evaluate_loss(model: MTPSModel, X, y, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy with dropout off."""
    P = model.predict_proba(X, batch_size)
    with F.no_grad():
        loss = cross_entropy(P, y).item()
    return loss, float(np.mean(np.argmax(P, axis=1) == y))


def _seed_int(seed) -> int:
    return hash_seed(seed)


def train(
    config: TrainConfig,
    X_train,
    y_train,
    X_val=None,
    y_val=None,
    model: MTPSModel | None = None,
    model_config: MtpsConfig | None = None,
) -> tuple[MTPSModel, TrainingLog]:
    """Fit an MTPS model; returns the best-validation-loss weights and the epoch log.

    Without explicit validation data, ``val_fraction`` of the training set
    is carved out by a stratified split; with ``val_fraction = 0`` the
    schedule monitors the training loss instead.
    """
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    if X_val is None and config.val_fraction <= 0:
        X_val, y_val = X_train, y_train  # monitor the training set itself
    elif X_val is None:
        fit_i, val_i = stratified_split(y_train, 1.0 - config.val_fraction, seed=[_seed_int(config.seed), 3])
        X_val, y_val = X_train[val_i], y_train[val_i]
        X_train, y_train = X_train[fit_i], y_train[fit_i]
    X_val = np.asarray(X_val, dtype=np.float64)
    y_val = np.asarray(y_val, dtype=np.int64)
    if X_val.shape[0] == 0:
        raise ValueError("empty validation set")

    if model is None:
        mcfg = config.model_config(model_config)
        model = MTPSModel(replace(mcfg, n_features=X_train.shape[-1]), seed=[_seed_int(config.seed), 0])
    params = model.params
    state = AdamState.for_params(params, config.beta1, config.beta2, config.adam_eps)
    schedule = PlateauSchedule(
        config.learning_rate, config.lr_plateau_patience, config.early_stop_patience,
        config.lr_factor, config.min_delta,
    )
    log = TrainingLog()
    best_weights = model.get_weights()
    n = X_train.shape[0]
    base = _seed_int(config.seed)

    for epoch in range(1, config.max_epochs + 1):
        lr = schedule.lr
        order = np.random.default_rng([base, epoch, 0]).permutation(n)
        drop_rng = np.random.default_rng([base, epoch, 1])
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            loss = cross_entropy(model.forward(X_train[idx], training=True, rng=drop_rng), y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"non-finite training loss at epoch {epoch}, batch {b}")
            loss.backward()
            try:
                adam_step(params, state, lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {b}: {exc}") from None
            total += value * idx.size
        val_loss, val_acc = evaluate_loss(model, X_val, y_val)
        if not math.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        log.append(epoch=epoch, train_loss=total / n, val_loss=val_loss, val_acc=val_acc, lr=lr)
        improved, reduced, stop = schedule.update(epoch, val_loss)
        logger.info("epoch %d train %.4f val %.4f acc %.4f lr %.2e", epoch, total / n, val_loss, val_acc, lr)
        if improved:
            best_weights = model.get_weights()
        if reduced:
            logger.info("learning rate reduced to %.3e", schedule.lr)
        if stop:
            log.stopped_early = True
            break
    log.best_epoch = schedule.best_epoch or log.rows[-1]["epoch"]
    model.set_weights(best_weights)
    return model, log


# ---------------------------------------------------------------- ablation


@dataclass
class AblationResult:
    accuracies: dict  # variant -> list of test accuracies (one per seed)
    parameters: dict  # variant -> parameter count

    def mean(self, variant: str) -> float:
        return float(np.mean(self.accuracies[variant]))

    def to_text(self) -> str:
        lines = [f"{'variant':<18}{'params':>9}{'mean acc':>10}  per-seed"]
        for v, accs in self.accuracies.items():
            seeds = " ".join(f"{a:.4f}" for a in accs)
            lines.append(f"{v:<18}{self.parameters[v]:>9}{self.mean(v):>10.4f}  {seeds}")
        return "\n".join(lines)


def test_accuracy(model: MTPSModel, X, y) -> float:
    return float(np.mean(model.predict(X) == np.asarray(y)))


test_accuracy.__test__ = False  # not a pytest test


def run_ablation(config: TrainConfig, data: Dataset, variants=VARIANTS, seeds=(0,), trained=None) -> AblationResult:
    """Train each variant on the same split for each seed and score on the test split.

    ``trained`` may map ``(variant, seed)`` to an already-fitted model to reuse.
    """
    trained = trained or {}
    accs: dict = {}
    counts: dict = {}
    for v in variants:
        accs[v] = []
        for s in seeds:
            model = trained.get((v, s))
            if model is None:
                cfg = replace(config, variant=v, seed=s)
                model, _ = train(cfg, data.X_train, data.y_train, data.X_val, data.y_val)
            accs[v].append(test_accuracy(model, data.X_test, data.y_test))
            counts[v] = model.n_parameters()
    return AblationResult(accs, counts)
