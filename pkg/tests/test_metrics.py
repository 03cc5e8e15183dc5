import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from mototp.metrics import (
    MetricsReport,
    UndefinedMetricError,
    accuracy_from_cm,
    betainc,
    binary_auc,
    calibration_curve,
    class_metrics,
    confusion_matrix,
    f_sf,
    metrics_from_counts,
    one_way_anova,
    paired_ttest,
    regression_metrics,
    roc_auc,
    roc_curve,
    significance_tests,
    t_sf_two_sided,
    wilson_ci,
)

# ------------------------------------------------------------------ Wilson


def test_wilson_worked_examples():
    lo, hi = wilson_ci(7277 / 7983, 7983)
    assert (round(lo, 3), round(hi, 3)) == (0.905, 0.918)
    lo, hi = wilson_ci(7277 / 8602, 8602)
    assert (round(lo, 3), round(hi, 3)) == (0.838, 0.853)


def test_wilson_at_zero():
    lo, hi = wilson_ci(0.0, 10)
    assert lo == 0.0
    z2 = 1.96**2
    assert hi == pytest.approx(z2 / 10 / (1 + z2 / 10), abs=1e-12)
    assert round(hi, 3) == 0.278


def test_wilson_rejects_empty():
    with pytest.raises(ValueError):
        wilson_ci(0.5, 0)


@given(st.integers(1, 100_000), st.floats(0, 1))
def test_wilson_contains_p_and_centre(n, frac):
    k = round(frac * n)
    p = k / n
    lo, hi = wilson_ci(p, n)
    assert 0.0 <= lo <= p <= hi <= 1.0
    z2 = 1.96**2
    centre = (p + z2 / (2 * n)) / (1 + z2 / n)
    assert lo - 1e-12 <= centre <= hi + 1e-12


def test_wilson_width_shrinks_like_root_n():
    w = [np.subtract(*wilson_ci(0.3, n)[::-1]) for n in (100, 10_000)]
    assert w[0] / w[1] == pytest.approx(10.0, rel=0.02)


# ---------------------------------------------------------- class metrics


def test_class_metrics_worked_example():
    m = metrics_from_counts(7277, 706, 1325)
    assert m.precision.value == pytest.approx(0.912, abs=1e-3)
    assert m.recall.value == pytest.approx(0.846, abs=1e-3)
    assert m.f1 == pytest.approx(0.878, abs=1e-3)
    assert m.precision.n == 7983 and m.recall.n == 8602


def test_diagonal_is_perfect():
    for c in class_metrics(np.diag([5, 7, 9])):
        assert c.precision.value == 1.0 and c.recall.value == 1.0


def test_empty_class_is_undefined_not_zero():
    cm = np.array([[5, 0, 0], [0, 4, 0], [0, 0, 0]])
    ntp = class_metrics(cm)[2]
    assert math.isnan(ntp.precision.value) and math.isnan(ntp.recall.value)
    assert not ntp.precision.defined
    with pytest.raises(UndefinedMetricError):
        class_metrics(np.zeros((3, 3)))


@given(st.lists(st.integers(0, 50), min_size=9, max_size=9))
def test_class_metrics_match_scalar_loops(cells):
    cm = np.array(cells).reshape(3, 3)
    if cm.sum() == 0:
        return
    for c, m in enumerate(class_metrics(cm)):
        tp = cm[c][c]
        col = sum(cm[r][c] for r in range(3))
        row = sum(cm[c][j] for j in range(3))
        if col:
            assert abs(m.precision.value - tp / col) < 1e-12
        if row:
            assert abs(m.recall.value - tp / row) < 1e-12
    assert accuracy_from_cm(cm) == np.trace(cm) / cm.sum()


def test_confusion_orientation():
    cm = confusion_matrix([0, 0, 1, 2], [0, 1, 1, 0])
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]


def test_macro_f1_between_class_extremes():
    r = np.random.default_rng(0)
    for _ in range(20):
        y = r.integers(0, 3, size=200)
        P = r.dirichlet(np.ones(3), size=200)
        P[np.arange(200), y] += r.random(200)
        P /= P.sum(axis=1, keepdims=True)
        rep = MetricsReport.compute(P, y)
        f1s = [c.f1 for c in rep.classes]
        assert min(f1s) <= rep.macro_f1 <= max(f1s)


# -------------------------------------------------------------------- AUC


def pairwise_auc(scores, positive):
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def test_auc_matches_pairwise_oracle():
    r = np.random.default_rng(1)
    for i in range(20):
        n = int(r.integers(10, 501))
        y = r.integers(0, 3, size=n)
        y[:3] = [0, 1, 2]
        # coarse rounding forces ties
        P = np.round(r.dirichlet(np.ones(3), size=n), 1 + i % 3)
        per, macro = roc_auc(P, y)
        oracle = [pairwise_auc(P[:, c], y == c) for c in range(3)]
        assert max(abs(a - b) for a, b in zip(per, oracle)) < 1e-12
        assert abs(macro - sum(oracle) / 3) < 1e-12


def test_auc_perfect_and_null():
    y = np.array([0] * 50 + [1] * 50)
    assert binary_auc(np.r_[np.zeros(50), np.ones(50)], y == 1) == 1.0
    r = np.random.default_rng(2)
    assert abs(binary_auc(r.random(20_000), r.random(20_000) < 0.5) - 0.5) < 0.05


def test_auc_monotone_invariance():
    r = np.random.default_rng(3)
    s, y = r.normal(size=300), r.random(300) < 0.4
    assert binary_auc(s, y) == binary_auc(np.exp(3 * s) + 7, y)


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc(np.full((4, 3), 1 / 3), [1, 1, 1, 1])


def test_roc_curve_endpoints():
    fpr, tpr = roc_curve([0.9, 0.8, 0.3, 0.1], [True, False, True, False])
    assert (fpr[0], tpr[0], fpr[-1], tpr[-1]) == (0.0, 0.0, 1.0, 1.0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(0.75)


# ------------------------------------------------------------- regression


def test_regression_perfect_and_mean():
    y = np.array([0, 1, 2, 2, 1])
    assert regression_metrics(y, y) == {"mae": 0.0, "mse": 0.0, "r2": 1.0}
    assert regression_metrics(np.full(5, y.mean()), y)["r2"] == pytest.approx(0.0, abs=1e-15)


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=2, max_size=60))
def test_regression_matches_naive(pairs):
    pred = [p for p, _ in pairs]
    true = [t for _, t in pairs]
    if len(set(true)) < 2:
        with pytest.raises(UndefinedMetricError):
            regression_metrics(pred, true)
        return
    n = len(pairs)
    mae = sum(abs(t - p) for p, t in pairs) / n
    mse = sum((t - p) ** 2 for p, t in pairs) / n
    mean_t = sum(true) / n
    r2 = 1 - sum((t - p) ** 2 for p, t in pairs) / sum((t - mean_t) ** 2 for t in true)
    got = regression_metrics(pred, true)
    assert abs(got["mae"] - mae) < 1e-12 and abs(got["mse"] - mse) < 1e-12 and abs(got["r2"] - r2) < 1e-12


# ------------------------------------------------------------ calibration


def test_ece_zero_for_confident_correct():
    y = np.array([0, 1, 2, 1])
    P = np.eye(3)[y]
    assert calibration_curve(P, y).ece == 0.0


def test_half_scores_bin_accuracy_is_prevalence():
    r = np.random.default_rng(4)
    y = r.integers(0, 2, size=1000)
    P = np.full((1000, 2), 0.5)
    curve = calibration_curve(P, y)
    ((_, cnt, conf, freq),) = curve.per_class[1]
    assert cnt == 1000 and conf == 0.5 and freq == pytest.approx(y.mean())


def test_well_specified_model_is_calibrated():
    r = np.random.default_rng(5)
    P = r.dirichlet(np.ones(3), size=5000)
    y = np.array([r.choice(3, p=p) for p in P])
    curve = calibration_curve(P, y)
    assert curve.ece < 0.05
    assert max(curve.class_ece) < 0.05


def test_calibration_bins_validated():
    with pytest.raises(ValueError):
        calibration_curve(np.full((2, 3), 1 / 3), [0, 1], bins=1)


# ------------------------------------------------------------ significance


def test_betainc_against_library():
    for a, b, x in [(0.5, 2.0, 0.3), (5.0, 0.5, 0.9), (2.0, 3.0, 0.5), (10, 10, 0.01), (1.5, 40, 0.2)]:
        assert betainc(a, b, x) == pytest.approx(sps.beta.cdf(x, a, b), abs=1e-12)


@pytest.mark.parametrize("t,df", [(0.3, 4), (2.5, 4), (-6.0, 9), (12.0, 3), (1.0, 1)])
def test_t_p_values(t, df):
    assert abs(t_sf_two_sided(t, df) - 2 * sps.t.sf(abs(t), df)) < 1e-8


@pytest.mark.parametrize("f,d1,d2", [(0.5, 2, 12), (3.9, 4, 20), (15.0, 1, 5)])
def test_f_p_values(f, d1, d2):
    assert abs(f_sf(f, d1, d2) - sps.f.sf(f, d1, d2)) < 1e-8


def test_identical_pairs_degenerate():
    res = paired_ttest([0.9, 0.91, 0.92], [0.9, 0.91, 0.92])
    assert res.degenerate and math.isnan(res.p_value)


def test_constant_shift_degenerate_then_perturbed():
    assert paired_ttest([2, 4, 6], [1, 3, 5]).degenerate
    a, b = np.array([2, 4, 6.0]), np.array([1, 3.1, 4.9])
    d = a - b
    t_manual = d.mean() / (d.std(ddof=1) / math.sqrt(3))
    res = paired_ttest(a, b)
    assert abs(res.statistic - t_manual) < 1e-9
    assert res.df == (2,)


def test_large_shift_small_noise_significant():
    r = np.random.default_rng(6)
    a = r.random(10)
    res = paired_ttest(a + 0.5 + r.normal(0, 1e-3, 10), a)
    assert abs(res.statistic) > 100 and res.p_value < 1e-3


def test_anova_matches_library_and_errors():
    groups = [[0.91, 0.92, 0.90, 0.93], [0.88, 0.87, 0.89, 0.90], [0.80, 0.85, 0.83, 0.84]]
    res = one_way_anova(*groups)
    ref = sps.f_oneway(*groups)
    assert res.statistic == pytest.approx(ref.statistic, rel=1e-12)
    assert abs(res.p_value - ref.pvalue) < 1e-8
    with pytest.raises(ValueError):
        one_way_anova([1, 2])
    out = significance_tests([1, 2, 3.5], [1, 2.2, 3], groups)
    assert set(out) == {"ttest", "anova"}


# ------------------------------------------------------------------ report


def test_report_structure(tmp_path):
    r = np.random.default_rng(7)
    y = r.integers(0, 3, size=300)
    P = r.dirichlet(np.ones(3), size=300)
    rep = MetricsReport.compute(P, y)
    assert rep.accuracy == pytest.approx(np.mean(P.argmax(1) == y))
    for c in rep.classes:
        for rate in (c.precision, c.recall):
            assert rate.ci[0] <= rate.value <= rate.ci[1]
    rep.write(tmp_path)
    csv_rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert csv_rows[0] == "metric,class,value,ci_low,ci_high"
    ci_rows = [row for row in csv_rows[1:] if row.split(",")[3]]
    assert len(ci_rows) == 6
    assert (tmp_path / "confusion_matrix.csv").read_text().splitlines()[0] == "true\\pred,HTP,LTP,NTP"
    again = MetricsReport.compute(P, y)
    assert again.to_csv() == rep.to_csv()
