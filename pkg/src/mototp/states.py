"""Six-phase rider-state decision table over (P_NTP, P_LTP, P_HTP) triples."""
from __future__ import annotations

import csv
import math
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .schema import CLASS_NAMES

INDETERMINATE = "Indeterminate"
DEFAULT_PRIORITY = (5, 4, 1, 3, 6, 2)

_COMPARATORS = {
    ">=": operator.ge,
    ">": operator.gt,
    "<=": operator.le,
    "<": operator.lt,
}
_CLASS_KEYS = {"ntp": "p_ntp", "ltp": "p_ltp", "htp": "p_htp"}


class RuleConfigError(ValueError):
    """Malformed rule definition; ``line`` is 1-based when it came from a file."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class StateProbabilities:
    p_ntp: float
    p_ltp: float
    p_htp: float

    def __post_init__(self):
        vals = (self.p_ntp, self.p_ltp, self.p_htp)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"probabilities must be finite and non-negative, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1, got {sum(vals)!r}")

    @classmethod
    def from_class_vector(cls, p) -> StateProbabilities:
        """From a vector in label order (HTP, LTP, NTP)."""
        p_htp, p_ltp, p_ntp = (float(v) for v in p)
        return cls(p_ntp, p_ltp, p_htp)

    @property
    def argmax(self) -> str:
        # ties broken toward the less severe class
        trio = (("NTP", self.p_ntp), ("LTP", self.p_ltp), ("HTP", self.p_htp))
        return max(trio, key=lambda kv: kv[1])[0]

    @property
    def argmax_label(self) -> int:
        return CLASS_NAMES.index(self.argmax)

    @property
    def confidence(self) -> float:
        return max(self.p_ntp, self.p_ltp, self.p_htp)

    def get(self, cls_name: str) -> float:
        return getattr(self, _CLASS_KEYS[cls_name.lower()])


@dataclass(frozen=True)
class Condition:
    cls: str  # NTP | LTP | HTP
    op: str
    bound: float

    def __post_init__(self):
        if self.cls.lower() not in _CLASS_KEYS:
            raise RuleConfigError(f"unknown class {self.cls!r}")
        if self.op not in _COMPARATORS:
            raise RuleConfigError(f"unknown comparator {self.op!r}")
        if not (0.0 <= self.bound <= 1.0):
            raise RuleConfigError(f"bound {self.bound} outside [0, 1]")

    def holds(self, p: StateProbabilities) -> bool:
        return _COMPARATORS[self.op](p.get(self.cls), self.bound)

    def __str__(self) -> str:
        return f"P({self.cls.upper()}) {self.op} {self.bound:g}"


@dataclass(frozen=True)
class ThresholdRule:
    phase: int
    name: str
    conditions: tuple[Condition, ...]
    intervention: str = ""
    priority: int = 0  # lower is evaluated first

    def __post_init__(self):
        if not 1 <= self.phase <= 6:
            raise RuleConfigError(f"phase must be 1..6, got {self.phase}")
        if not self.conditions:
            raise RuleConfigError(f"phase {self.phase} has no conditions")

    def matches(self, p: StateProbabilities) -> bool:
        return all(c.holds(p) for c in self.conditions)


def _c(cls, op, bound):
    return Condition(cls, op, bound)


DEFAULT_RULES: tuple[ThresholdRule, ...] = (
    ThresholdRule(1, "Calm", (_c("NTP", ">=", 0.80), _c("LTP", "<=", 0.15), _c("HTP", "<=", 0.10)),
                  "none", DEFAULT_PRIORITY.index(1)),
    ThresholdRule(2, "Transition", (_c("NTP", ">=", 0.50), _c("NTP", "<", 0.70), _c("LTP", ">=", 0.25),
                                    _c("LTP", "<", 0.40), _c("HTP", "<", 0.10)),
                  "passive_monitoring", DEFAULT_PRIORITY.index(2)),
    ThresholdRule(3, "Manageable Stress", (_c("LTP", ">=", 0.65), _c("NTP", "<=", 0.30), _c("HTP", "<=", 0.10)),
                  "soft_advisory", DEFAULT_PRIORITY.index(3)),
    ThresholdRule(4, "Elevated Risk", (_c("HTP", ">=", 0.30), _c("LTP", ">=", 0.40), _c("LTP", "<", 0.60),
                                       _c("NTP", "<=", 0.15)),
                  "active_warning", DEFAULT_PRIORITY.index(4)),
    ThresholdRule(5, "Critical", (_c("HTP", ">=", 0.70), _c("NTP", "<=", 0.10)),
                  "critical_alert", DEFAULT_PRIORITY.index(5)),
    ThresholdRule(6, "Recovery", (_c("LTP", ">=", 0.65), _c("HTP", ">", 0.10), _c("HTP", "<=", 0.20),
                                  _c("NTP", ">", 0.10), _c("NTP", "<=", 0.20)),
                  "recovery_support", DEFAULT_PRIORITY.index(6)),
)


@dataclass(frozen=True)
class RiderStateDecision:
    phase: int | str  # 1..6 or INDETERMINATE
    rule: ThresholdRule | None
    intervention: str
    argmax: str
    persistence: int = 1

    @property
    def indeterminate(self) -> bool:
        return self.rule is None

    @property
    def name(self) -> str:
        return INDETERMINATE if self.rule is None else self.rule.name


def _ordered(rules: Iterable[ThresholdRule]) -> list[ThresholdRule]:
    return sorted(rules, key=lambda r: (r.priority, r.phase))


def classify_state(p: StateProbabilities, rules: Sequence[ThresholdRule] = DEFAULT_RULES) -> RiderStateDecision:
    """First matching rule by explicit priority; no match gives an Indeterminate decision."""
    for rule in _ordered(rules):
        if rule.matches(p):
            return RiderStateDecision(rule.phase, rule, rule.intervention, p.argmax)
    return RiderStateDecision(INDETERMINATE, None, "none", p.argmax)


def smooth_state(phases: Sequence, k: int = 3, bypass=(5,)) -> list:
    """Persistence filter over a stream of raw phases.

    The emitted phase changes only once ``k`` consecutive raw phases agree on
    the new value; phases in ``bypass`` are emitted immediately.
    """
    if k < 1:
        raise ValueError(f"persistence window must be >= 1, got {k}")
    out: list = []
    current = None
    run_value, run_len = None, 0
    for raw in phases:
        if raw == run_value:
            run_len += 1
        else:
            run_value, run_len = raw, 1
        if current is None or raw in bypass or run_len >= k:
            current = raw
        out.append(current)
    return out


# ------------------------------------------------------------- analysis


def simplex_grid(resolution: float = 0.01) -> np.ndarray:
    """All (p_ntp, p_ltp, p_htp) on the simplex with coordinates multiple of ``resolution``."""
    n = int(round(1.0 / resolution))
    pts = [(i, j, n - i - j) for i in range(n + 1) for j in range(n + 1 - i)]
    return np.asarray(pts, dtype=np.float64) / n


@dataclass
class CoverageReport:
    n_points: int
    matched: dict = field(default_factory=dict)  # phase -> fraction after priority resolution
    raw_matched: dict = field(default_factory=dict)  # phase -> fraction before resolution
    overlap_fraction: float = 0.0
    overlaps: dict = field(default_factory=dict)  # (a, b) -> count
    indeterminate: float = 0.0

    @property
    def coverage(self) -> float:
        return 1.0 - self.indeterminate

    def to_text(self) -> str:
        lines = [f"grid points: {self.n_points}"]
        for ph in sorted(self.matched):
            lines.append(f"phase {ph}: {self.matched[ph]:.4f} (raw {self.raw_matched[ph]:.4f})")
        lines.append(f"overlapping points: {self.overlap_fraction:.4f}")
        lines.append(f"indeterminate: {self.indeterminate:.4f}")
        return "\n".join(lines)


def coverage_report(rules: Sequence[ThresholdRule] = DEFAULT_RULES, resolution: float = 0.01) -> CoverageReport:
    grid = simplex_grid(resolution)
    ordered = _ordered(rules)
    n = grid.shape[0]
    hits = np.zeros((n, len(ordered)), dtype=bool)
    for i, (a, b, c) in enumerate(grid):
        # grid coordinates are exact multiples; the sum check inside StateProbabilities is safe
        p = StateProbabilities(float(a), float(b), float(c))
        hits[i] = [r.matches(p) for r in ordered]
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), -1)
    rep = CoverageReport(n)
    for j, r in enumerate(ordered):
        rep.matched[r.phase] = float(np.mean(first == j))
        rep.raw_matched[r.phase] = float(hits[:, j].mean())
    rep.indeterminate = float(np.mean(first < 0))
    rep.overlap_fraction = float(np.mean(hits.sum(axis=1) > 1))
    for a in range(len(ordered)):
        for b in range(a + 1, len(ordered)):
            both = int(np.sum(hits[:, a] & hits[:, b]))
            if both:
                rep.overlaps[(ordered[a].phase, ordered[b].phase)] = both
    return rep


# ----------------------------------------------------------------- I/O


def _parse_condition(text: str, line: int) -> Condition:
    import re

    m = re.fullmatch(r"\s*(?:P\()?\s*(NTP|LTP|HTP)\s*\)?\s*(>=|<=|>|<)\s*([-+0-9.eE]+)\s*", text, re.IGNORECASE)
    if not m:
        raise RuleConfigError(f"cannot parse condition {text.strip()!r}", line)
    try:
        bound = float(m.group(3))
    except ValueError:
        raise RuleConfigError(f"bad bound in {text.strip()!r}", line) from None
    try:
        return Condition(m.group(1).upper(), m.group(2), bound)
    except RuleConfigError as exc:
        raise RuleConfigError(str(exc), line) from None


def parse_rules(text: str) -> tuple[ThresholdRule, ...]:
    """Parse ``phaseN.<key> = value`` lines.

    Keys: ``name``, ``when`` (conditions joined by ``&``), ``intervention``
    and ``priority``. ``#`` starts a comment. Example::

        phase5.name = Critical
        phase5.when = P(HTP) >= 0.70 & P(NTP) <= 0.10
        phase5.priority = 0
    """
    import re

    fields: dict[int, dict] = {}
    first_line: dict[int, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line.replace(">=", "").replace("<=", ""):
            raise RuleConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        m = re.fullmatch(r"phase([1-6])\.(name|when|intervention|priority)", key)
        if not m:
            raise RuleConfigError(f"unknown key {key!r}", lineno)
        ph = int(m.group(1))
        first_line.setdefault(ph, lineno)
        entry = fields.setdefault(ph, {})
        attr = m.group(2)
        if attr == "when":
            entry["conditions"] = tuple(_parse_condition(part, lineno) for part in value.split("&"))
        elif attr == "priority":
            try:
                entry["priority"] = int(value)
            except ValueError:
                raise RuleConfigError(f"priority must be an integer, got {value!r}", lineno) from None
        else:
            entry[attr] = value
    rules = []
    for ph, entry in sorted(fields.items()):
        if "conditions" not in entry:
            raise RuleConfigError(f"phase {ph} has no 'when' line", first_line[ph])
        rules.append(
            ThresholdRule(ph, entry.get("name", f"Phase {ph}"), entry["conditions"], entry.get("intervention", ""),
                          entry.get("priority", DEFAULT_PRIORITY.index(ph)))
        )
    if not rules:
        raise RuleConfigError("no rules defined")
    return tuple(rules)


def load_rules(path) -> tuple[ThresholdRule, ...]:
    return parse_rules(Path(path).read_text(encoding="utf-8"))


def format_rules(rules: Sequence[ThresholdRule] = DEFAULT_RULES) -> str:
    lines = []
    for r in sorted(rules, key=lambda r: r.phase):
        lines += [
            f"phase{r.phase}.name = {r.name}",
            f"phase{r.phase}.when = " + " & ".join(str(c) for c in r.conditions),
            f"phase{r.phase}.intervention = {r.intervention}",
            f"phase{r.phase}.priority = {r.priority}",
            "",
        ]
    return "\n".join(lines)


DECISION_HEADER = ("timestamp", "ride_id", "raw_phase", "smoothed_phase", "intervention", "p_ntp", "p_ltp", "p_htp")


def write_decisions_csv(path, rows) -> None:
    """``rows`` are dicts keyed by :data:`DECISION_HEADER`."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECISION_HEADER)
        for r in rows:
            w.writerow([r[k] if not isinstance(r[k], float) else f"{r[k]:.6f}" for k in DECISION_HEADER])


def intervention_for(phase, rules: Sequence[ThresholdRule] = DEFAULT_RULES) -> str:
    for r in rules:
        if r.phase == phase:
            return r.intervention
    return "none"
