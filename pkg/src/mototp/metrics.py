"""Classification, regression and calibration statistics, Wilson intervals, t-test and ANOVA."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .schema import CLASS_NAMES

Z95 = 1.959963984540054  # two-sided 95% normal quantile; rounds to 1.96


class UndefinedMetricError(ValueError):
    pass


# ----------------------------------------------------------------- Wilson


def wilson_ci(p: float, n: int, z: float = 1.96) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion ``p`` observed over ``n`` trials."""
    if n < 1:
        raise ValueError(f"Wilson interval needs n >= 1, got {n}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"proportion must be in [0, 1], got {p}")
    z2 = z * z
    denom = 1.0 + z2 / n
    centre = p + z2 / (2.0 * n)
    half = z * math.sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n))
    lo = 0.0 if p == 0.0 else (centre - half) / denom
    hi = 1.0 if p == 1.0 else (centre + half) / denom
    return max(0.0, lo), min(1.0, hi)


# ------------------------------------------------------- confusion matrix


def confusion_matrix(y_true, y_pred, n_classes: int = 3) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


@dataclass(frozen=True)
class Rate:
    """A proportion ``k / n`` with its Wilson interval; ``value`` is NaN when n = 0."""

    k: int
    n: int
    value: float
    ci: tuple[float, float]

    @property
    def defined(self) -> bool:
        return self.n > 0

    @classmethod
    def of(cls, k: int, n: int, z: float = 1.96) -> Rate:
        if n == 0:
            return cls(int(k), 0, math.nan, (math.nan, math.nan))
        p = k / n
        return cls(int(k), int(n), p, wilson_ci(p, n, z))

    def fmt(self, digits: int = 3) -> str:
        if not self.defined:
            return "undefined"
        lo, hi = self.ci
        return f"{self.value:.{digits}f} ({lo:.{digits}f}-{hi:.{digits}f})"


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    tp: int
    fp: int
    fn: int
    precision: Rate
    recall: Rate

    @property
    def f1(self) -> float:
        p, r = self.precision.value, self.recall.value
        if math.isnan(p) or math.isnan(r):
            return math.nan
        return 0.0 if p + r == 0 else 2 * p * r / (p + r)

    @property
    def support(self) -> int:
        return self.tp + self.fn


def metrics_from_counts(tp: int, fp: int, fn: int, name: str = "", z: float = 1.96) -> ClassMetrics:
    """Precision over TP+FP and recall over TP+FN, each with a Wilson interval."""
    return ClassMetrics(name, int(tp), int(fp), int(fn), Rate.of(tp, tp + fp, z), Rate.of(tp, tp + fn, z))


def class_metrics(cm, names=CLASS_NAMES, z: float = 1.96) -> list[ClassMetrics]:
    cm = np.asarray(cm)
    if cm.sum() <= 0:
        raise UndefinedMetricError("confusion matrix is empty")
    out = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum() - tp)
        fn = int(cm[c, :].sum() - tp)
        out.append(metrics_from_counts(tp, fp, fn, names[c] if c < len(names) else str(c), z))
    return out


def accuracy_from_cm(cm) -> float:
    cm = np.asarray(cm)
    return float(np.trace(cm) / cm.sum())


def _nanmean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


# --------------------------------------------------------------- ROC-AUC


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.shape[0])
    i = 0
    n = x.shape[0]
    while i < n:
        j = i
        while j + 1 < n and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_auc(scores, positive) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    ranks = _midranks(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores, labels, n_classes: int | None = None) -> tuple[list[float], float]:
    """One-vs-rest AUC per class column of ``scores`` and their unweighted mean."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = scores.shape[1] if n_classes is None else n_classes
    if np.unique(labels).size < 2:
        raise UndefinedMetricError("AUC undefined: only one class present in labels")
    per = [binary_auc(scores[:, c], labels == c) for c in range(k)]
    return per, float(np.mean(per))


def roc_curve(scores, positive) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) points over all distinct thresholds, starting at (0, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], positive[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), y.size - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    n_pos, n_neg = max(int(y.sum()), 1), max(int((~y).sum()), 1)
    return np.r_[0.0, fps / n_neg], np.r_[0.0, tps / n_pos]


# ------------------------------------------------------------- regression


def regression_metrics(predicted, true) -> dict:
    """MAE, MSE and R^2 over integer-encoded class labels."""
    p = np.asarray(predicted, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if t.size == 0:
        raise ValueError("empty input")
    resid = t - p
    ss_tot = float(np.sum((t - t.mean()) ** 2))
    if ss_tot == 0.0:
        raise UndefinedMetricError("R^2 undefined: true labels are constant")
    return {
        "mae": float(np.mean(np.abs(resid))),
        "mse": float(np.mean(resid**2)),
        "r2": 1.0 - float(np.sum(resid**2)) / ss_tot,
    }


# ------------------------------------------------------------ calibration


@dataclass
class CalibrationCurve:
    edges: np.ndarray
    per_class: list  # per class: list of (bin index, count, mean confidence, observed frequency)
    ece: float
    class_ece: list


def calibration_curve(scores, labels, bins: int = 10) -> CalibrationCurve:
    """Equal-width reliability bins per class (one-vs-rest) and top-label ECE.

    Per class, a bin's confidence is the mean predicted probability of that
    class and its accuracy the observed frequency of the class. ``ece`` uses
    the top-label confidence against correctness; empty bins are skipped.
    """
    if bins < 2:
        raise ValueError("need at least 2 bins")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    edges = np.linspace(0.0, 1.0, bins + 1)

    def bin_of(p):
        return np.clip(np.searchsorted(edges, p, side="right") - 1, 0, bins - 1)

    def ece_of(conf, hit):
        b = bin_of(conf)
        total = 0.0
        rows = []
        for i in range(bins):
            sel = b == i
            cnt = int(sel.sum())
            if cnt == 0:
                continue
            c, a = float(conf[sel].mean()), float(hit[sel].mean())
            rows.append((i, cnt, c, a))
            total += cnt / conf.size * abs(c - a)
        return total, rows

    per_class, class_ece = [], []
    for k in range(scores.shape[1]):
        e, rows = ece_of(scores[:, k], (labels == k).astype(float))
        per_class.append(rows)
        class_ece.append(e)
    top = scores.max(axis=1)
    hit = (scores.argmax(axis=1) == labels).astype(float)
    ece, _ = ece_of(top, hit)
    return CalibrationCurve(edges, per_class, ece, class_ece)


# ------------------------------------------------------- special functions


def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 500) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    ln_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def f_sf(f: float, d1: float, d2: float) -> float:
    """Upper tail P(F >= f) of the F distribution."""
    if f <= 0:
        return 1.0
    return betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))


# --------------------------------------------------------- significance


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    df: tuple
    degenerate: bool = False
    note: str = ""


TestResult.__test__ = False


def paired_ttest(a, b) -> TestResult:
    """Two-sided paired t-test; zero variance of differences is flagged degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("paired t-test needs two equal-length vectors of at least 2 values")
    d = a - b
    n = d.size
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return TestResult(math.nan, math.nan, (n - 1,), True, f"zero variance of differences (mean diff {d.mean():g})")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return TestResult(t, t_sf_two_sided(t, n - 1), (n - 1,))


def one_way_anova(*groups) -> TestResult:
    """One-way ANOVA F test across groups of scores."""
    gs = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(gs) < 2 or any(g.size < 2 for g in gs):
        raise ValueError("ANOVA needs at least 2 groups of at least 2 values")
    allv = np.concatenate(gs)
    grand = allv.mean()
    k, n = len(gs), allv.size
    ss_between = sum(g.size * (g.mean() - grand) ** 2 for g in gs)
    ss_within = sum(float(np.sum((g - g.mean()) ** 2)) for g in gs)
    df1, df2 = k - 1, n - k
    if ss_within == 0.0:
        return TestResult(math.nan, math.nan, (df1, df2), True, "zero within-group variance")
    F = (ss_between / df1) / (ss_within / df2)
    return TestResult(float(F), f_sf(F, df1, df2), (df1, df2))


def significance_tests(fold_scores_a, fold_scores_b, all_models_scores=None) -> dict:
    out = {"ttest": paired_ttest(fold_scores_a, fold_scores_b)}
    if all_models_scores is not None:
        out["anova"] = one_way_anova(*all_models_scores)
    return out


# ------------------------------------------------------------------ report


@dataclass
class MetricsReport:
    confusion: np.ndarray
    classes: list
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    auc_per_class: list
    auc_macro: float
    regression: dict
    calibration: CalibrationCurve
    names: tuple = field(default=CLASS_NAMES)

    @classmethod
    def compute(cls, scores, labels, names=CLASS_NAMES, bins: int = 10) -> MetricsReport:
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        k = scores.shape[1]
        pred = scores.argmax(axis=1)
        cm = confusion_matrix(labels, pred, k)
        cls_m = class_metrics(cm, names)
        try:
            auc_per, auc_macro = roc_auc(scores, labels)
        except UndefinedMetricError:
            auc_per, auc_macro = [math.nan] * k, math.nan
        try:
            reg = regression_metrics(pred, labels)
        except UndefinedMetricError:
            resid = labels - pred
            reg = {"mae": float(np.mean(np.abs(resid))), "mse": float(np.mean(resid**2)), "r2": math.nan}
        return cls(
            cm, cls_m, accuracy_from_cm(cm),
            _nanmean(c.precision.value for c in cls_m),
            _nanmean(c.recall.value for c in cls_m),
            _nanmean(c.f1 for c in cls_m),
            auc_per, auc_macro, reg, calibration_curve(scores, labels, bins), tuple(names),
        )

    def rows(self) -> list[tuple[str, str, str, str, str]]:
        """(metric, class, value, ci_low, ci_high) rows."""
        def f(v):
            return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"

        out = [("accuracy", "all", f(self.accuracy), "", "")]
        for name, v in (("precision", self.macro_precision), ("recall", self.macro_recall), ("f1", self.macro_f1)):
            out.append((name, "macro", f(v), "", ""))
        for c in self.classes:
            for mname, rate in (("precision", c.precision), ("recall", c.recall)):
                out.append((mname, c.name, f(rate.value), f(rate.ci[0]), f(rate.ci[1])))
            out.append(("f1", c.name, f(c.f1), "", ""))
        for name, v in zip(self.names, self.auc_per_class):
            out.append(("roc_auc", name, f(v), "", ""))
        out.append(("roc_auc", "macro", f(self.auc_macro), "", ""))
        for key in ("mae", "mse", "r2"):
            out.append((key, "all", f(self.regression[key]), "", ""))
        out.append(("ece", "all", f(self.calibration.ece), "", ""))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("metric", "class", "value", "ci_low", "ci_high"))
        w.writerows(self.rows())
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.names])
        for name, row in zip(self.names, self.confusion):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"accuracy  {self.accuracy:.4f}",
            f"macro P/R/F1  {self.macro_precision:.4f} / {self.macro_recall:.4f} / {self.macro_f1:.4f}",
            f"macro ROC-AUC  {self.auc_macro:.4f}",
            "MAE {mae:.4f}  MSE {mse:.4f}  R2 {r2:.4f}".format(**self.regression),
            f"ECE  {self.calibration.ece:.4f}",
            "",
            f"{'class':<6}{'precision (95% CI)':<26}{'recall (95% CI)':<26}{'F1':>6}",
        ]
        for c in self.classes:
            f1 = "undef" if math.isnan(c.f1) else f"{c.f1:.3f}"
            lines.append(f"{c.name:<6}{c.precision.fmt():<26}{c.recall.fmt():<26}{f1:>6}")
        return "\n".join(lines) + "\n"

    def write(self, report_dir) -> None:
        d = Path(report_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "metrics.csv").write_text(self.to_csv(), encoding="utf-8")
        (d / "metrics.txt").write_text(self.to_text(), encoding="utf-8")
        (d / "confusion_matrix.csv").write_text(self.confusion_csv(), encoding="utf-8")
