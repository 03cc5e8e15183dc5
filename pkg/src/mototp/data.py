"""Session ingestion and preprocessing: CSV I/O, imputation, normalization, windowing."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schema import (
    CUMULATIVE_FEATURES,
    FEATURE_INDEX,
    FEATURE_NAMES,
    FEATURES,
    META_COLUMNS,
    N_FEATURES,
    OPTIONAL_COLUMNS,
    SchemaError,
    parse_label,
)

logger = logging.getLogger(__name__)


@dataclass
class RawSession:
    """One ride: a (n_samples, 63) value matrix plus its labels.

    ``values`` may contain NaN before imputation. ``meta`` carries generator
    bookkeeping (event counts, speed SD) and is not written to CSV.
    """

    ride_id: str
    participant_id: str
    label: int
    values: np.ndarray
    collision: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass
class RideSequence:
    values: np.ndarray  # (T, 63)
    label: int
    ride_id: str
    participant_id: str
    collision: int | None = None


class RowError(ValueError):
    """An unparseable CSV cell; carries the 1-based file line number."""

    def __init__(self, path, line: int, column: str, cell: str):
        super().__init__(f"{path}:{line}: cannot parse {column}={cell!r}")
        self.line = line
        self.column = column


# ---------------------------------------------------------------- CSV I/O


def _parse_cell(cell: str, column: str) -> float:
    text = cell.strip()
    if text == "" or text.lower() == "nan":
        return math.nan
    if column == "gear" and text.upper() == "N":
        return 0.0
    return float(text)


def ingest_csv(path) -> list[RawSession]:
    """Read a session CSV into one :class:`RawSession` per ``ride_id``.

    Rows of a ride need not be contiguous; their order is preserved.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        header = [h.strip() for h in header]
        known = set(FEATURE_NAMES) | set(META_COLUMNS) | set(OPTIONAL_COLUMNS)
        unknown = [h for h in header if h not in known]
        if unknown:
            raise SchemaError(f"{path}: unknown columns {unknown}")
        missing = [h for h in (*FEATURE_NAMES, *META_COLUMNS) if h not in header]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
        col = {h: i for i, h in enumerate(header)}
        feat_cols = [col[name] for name in FEATURE_NAMES]
        has_collision = "collision" in col

        rides: dict[str, dict] = {}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RowError(path, line, "<row>", ",".join(row))
            values = []
            for name, ci in zip(FEATURE_NAMES, feat_cols):
                try:
                    values.append(_parse_cell(row[ci], name))
                except ValueError:
                    raise RowError(path, line, name, row[ci]) from None
            ride_id = row[col["ride_id"]]
            try:
                label = parse_label(row[col["tp_label"]])
            except (ValueError, SchemaError):
                raise RowError(path, line, "tp_label", row[col["tp_label"]]) from None
            collision = None
            if has_collision and row[col["collision"]].strip() != "":
                try:
                    collision = int(float(row[col["collision"]]))
                except ValueError:
                    raise RowError(path, line, "collision", row[col["collision"]]) from None
            entry = rides.setdefault(
                ride_id,
                {
                    "participant": row[col["participant_id"]],
                    "label": label,
                    "collision": collision,
                    "rows": [],
                },
            )
            if entry["label"] != label:
                raise SchemaError(f"{path}:{line}: ride {ride_id} changes tp_label mid-ride")
            entry["rows"].append(values)

    return [
        RawSession(
            ride_id=rid,
            participant_id=e["participant"],
            label=e["label"],
            values=np.asarray(e["rows"], dtype=np.float64).reshape(-1, N_FEATURES),
            collision=e["collision"],
        )
        for rid, e in rides.items()
    ]


def _fmt(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_session_csv(path, sessions) -> None:
    """Write sessions with the interchange header; floats use ``repr`` so re-ingest is exact."""
    sessions = list(sessions)
    with_collision = any(s.collision is not None for s in sessions)
    header = [*FEATURE_NAMES, *META_COLUMNS] + (["collision"] if with_collision else [])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for s in sessions:
            tail = [str(s.label), s.ride_id, s.participant_id]
            if with_collision:
                tail.append("" if s.collision is None else str(s.collision))
            for row in s.values:
                writer.writerow([_fmt(v) for v in row] + tail)


def load_corpus(data_dir) -> list[RawSession]:
    """Ingest every ``*.csv`` under ``data_dir`` in sorted filename order."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    sessions = []
    for p in sorted(data_dir.glob("*.csv")):
        sessions.extend(ingest_csv(p))
    return sessions


# ------------------------------------------------------------- imputation


def _ffill_bfill(col: np.ndarray) -> np.ndarray:
    n = col.shape[0]
    valid = ~np.isnan(col)
    if not valid.any():
        return col
    idx = np.where(valid, np.arange(n), -1)
    np.maximum.accumulate(idx, out=idx)
    out = np.where(idx >= 0, col[np.clip(idx, 0, None)], np.nan)
    # head: backward fill from the first valid sample
    first = int(np.argmax(valid))
    out[:first] = col[first]
    return out


def _mode(col: np.ndarray) -> float:
    vals, counts = np.unique(col[~np.isnan(col)], return_counts=True)
    return float(vals[np.argmax(counts)])


def impute(sessions: list[RawSession]) -> list[RawSession]:
    """Fill gaps: continuous/count columns forward, then backward, then with the
    corpus mean; binary/categorical columns with the session mode, falling back
    to the corpus mode. Returns new sessions; inputs are not modified."""
    if not sessions:
        return []
    stacked = np.concatenate([s.values for s in sessions], axis=0)
    all_missing = [FEATURE_NAMES[j] for j in range(N_FEATURES) if np.isnan(stacked[:, j]).all()]
    if all_missing and stacked.shape[0] > 0:
        raise SchemaError(f"features entirely missing: {all_missing}")
    out = []
    for s in sessions:
        v = s.values.copy()
        for j, feat in enumerate(FEATURES):
            col = v[:, j]
            if not np.isnan(col).any():
                continue
            if feat.value_kind in ("continuous", "count"):
                col = _ffill_bfill(col)
                if np.isnan(col).any():
                    col[np.isnan(col)] = np.nanmean(stacked[:, j])
            else:
                fill = _mode(col) if (~np.isnan(col)).any() else _mode(stacked[:, j])
                col = np.where(np.isnan(col), fill, col)
            v[:, j] = col
        out.append(RawSession(s.ride_id, s.participant_id, s.label, v, s.collision, dict(s.meta)))
    return out


# ---------------------------------------------------------- normalization


@dataclass
class NormalizationStats:
    """Per-feature affine scaling ``(x - shift) / scale`` fitted on a training split.

    ``mode[j]`` is ``"zscore"`` (shift=mean, scale=std) or ``"minmax"``
    (shift=min, scale=max-min). Features listed in ``dropped`` had zero spread
    and are mapped to the constant 0 so the column count stays at 63.
    """

    shift: np.ndarray
    scale: np.ndarray
    mode: tuple[str, ...]
    dropped: tuple[str, ...] = ()

    @classmethod
    def identity(cls, n_features: int = N_FEATURES) -> NormalizationStats:
        return cls(np.zeros(n_features), np.ones(n_features), ("zscore",) * n_features)

    def to_dict(self) -> dict:
        return {
            "shift": self.shift.tolist(),
            "scale": self.scale.tolist(),
            "mode": list(self.mode),
            "dropped": list(self.dropped),
        }

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationStats:
        return cls(
            np.asarray(d["shift"], dtype=np.float64),
            np.asarray(d["scale"], dtype=np.float64),
            tuple(d["mode"]),
            tuple(d.get("dropped", ())),
        )


def default_modes(features=FEATURES) -> tuple[str, ...]:
    return tuple("zscore" if f.value_kind == "continuous" else "minmax" for f in features)


def fit_normalization(X: np.ndarray, mode="schema", names=FEATURE_NAMES) -> NormalizationStats:
    """Compute scaling stats over every sample of ``X`` (..., n_features).

    ``mode`` is ``"zscore"``, ``"minmax"`` or ``"schema"`` (z-score for
    continuous features, min-max for counts, flags and categories).
    """
    X = np.asarray(X, dtype=np.float64)
    flat = X.reshape(-1, X.shape[-1])
    n_feat = flat.shape[1]
    if mode == "schema":
        modes = default_modes() if n_feat == N_FEATURES else ("zscore",) * n_feat
    elif mode in ("zscore", "minmax"):
        modes = (mode,) * n_feat
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    lo = flat.min(axis=0)
    hi = flat.max(axis=0)
    shift = np.where(np.array(modes) == "zscore", mean, lo)
    scale = np.where(np.array(modes) == "zscore", std, hi - lo)
    dropped = []
    for j in range(n_feat):
        if not scale[j] > 0:
            name = names[j] if j < len(names) else str(j)
            dropped.append(name)
            shift[j] = mean[j]
            scale[j] = 1.0
    if dropped:
        warnings.warn(f"constant features dropped (mapped to 0): {dropped}", stacklevel=2)
    return NormalizationStats(shift, scale, tuple(modes), tuple(dropped))


def normalize(X: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return (X - stats.shift) / stats.scale


def normalize_sessions(sessions, stats: NormalizationStats) -> list[RawSession]:
    return [
        RawSession(s.ride_id, s.participant_id, s.label, normalize(s.values, stats), s.collision, dict(s.meta))
        for s in sessions
    ]


# --------------------------------------------------------------- windowing


def n_windows(length: int, T: int, stride: int) -> int:
    return 0 if length < T else (length - T) // stride + 1


CUMULATIVE_INDEX = np.array([FEATURE_INDEX[n] for n in CUMULATIVE_FEATURES])


def window(sessions, T: int = 64, stride: int = 32, rebase: bool = True) -> list[RideSequence]:
    """Slice each ride into overlapping length-``T`` windows; trailing partials dropped.

    With ``rebase`` the running quantities in ``CUMULATIVE_FEATURES`` are
    expressed relative to the window's first sample, so a window carries the
    events and motion inside it rather than where in the ride it was cut.
    Rebasing commutes with any affine per-feature scaling only up to the
    shift, so apply it to raw or z-scored values consistently.
    """
    if T < 1 or stride < 1:
        raise ValueError("window length and stride must be >= 1")
    out = []
    for s in sessions:
        k = n_windows(len(s), T, stride)
        if k == 0:
            warnings.warn(f"ride {s.ride_id} shorter than window ({len(s)} < {T}); skipped", stacklevel=2)
            continue
        for i in range(k):
            vals = s.values[i * stride : i * stride + T]
            if rebase and s.values.shape[1] == N_FEATURES:
                vals = vals.copy()
                vals[:, CUMULATIVE_INDEX] -= vals[0, CUMULATIVE_INDEX]
            out.append(RideSequence(vals, s.label, s.ride_id, s.participant_id, s.collision))
    return out


def stack_windows(windows: list[RideSequence]):
    """Return ``(X, y)`` arrays of shape (n, T, F) and (n,)."""
    if not windows:
        return np.zeros((0, 0, N_FEATURES)), np.zeros(0, dtype=np.int64)
    X = np.stack([w.values for w in windows])
    y = np.array([w.label for w in windows], dtype=np.int64)
    return X, y


def feature_column(X: np.ndarray, name: str) -> np.ndarray:
    return X[..., FEATURE_INDEX[name]]
