import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mototp.states import (
    DEFAULT_RULES,
    INDETERMINATE,
    Condition,
    RuleConfigError,
    StateProbabilities,
    ThresholdRule,
    classify_state,
    coverage_report,
    format_rules,
    load_rules,
    parse_rules,
    simplex_grid,
    smooth_state,
)

PHASE_TRIPLES = {
    1: (0.85, 0.10, 0.05),
    2: (0.60, 0.35, 0.05),
    3: (0.25, 0.70, 0.05),
    4: (0.10, 0.50, 0.40),
    5: (0.05, 0.15, 0.80),
    6: (0.15, 0.70, 0.15),
}


@pytest.mark.parametrize("phase,triple", sorted(PHASE_TRIPLES.items()))
def test_each_phase_reachable(phase, triple):
    d = classify_state(StateProbabilities(*triple))
    assert d.phase == phase
    assert not d.indeterminate
    assert d.intervention == d.rule.intervention


def test_calm_and_critical_examples():
    calm = classify_state(StateProbabilities(0.85, 0.10, 0.05))
    assert calm.phase == 1 and calm.intervention == "none"
    crit = classify_state(StateProbabilities(0.05, 0.15, 0.80))
    assert crit.phase == 5 and crit.intervention == "critical_alert"


def test_indeterminate_keeps_argmax():
    d = classify_state(StateProbabilities(0.40, 0.35, 0.25))
    assert d.phase == INDETERMINATE
    assert d.indeterminate and d.rule is None
    assert d.argmax == "NTP"
    assert d.name == INDETERMINATE


def test_probabilities_validated():
    with pytest.raises(ValueError):
        StateProbabilities(0.5, 0.5, 0.5)
    with pytest.raises(ValueError):
        StateProbabilities(1.1, -0.1, 0.0)
    with pytest.raises(ValueError):
        StateProbabilities(float("nan"), 0.5, 0.5)


def test_from_class_vector_uses_label_order():
    p = StateProbabilities.from_class_vector([0.7, 0.2, 0.1])  # HTP, LTP, NTP
    assert (p.p_htp, p.p_ltp, p.p_ntp) == (0.7, 0.2, 0.1)
    assert p.argmax == "HTP" and p.argmax_label == 0


def test_grid_phases_1_and_5_disjoint_and_gap_nonempty():
    rep = coverage_report(resolution=0.01)
    assert rep.n_points == 5151
    assert (1, 5) not in rep.overlaps and (5, 1) not in rep.overlaps
    assert rep.indeterminate > 0
    assert rep.matched[1] > 0 and rep.matched[5] > 0


def test_default_rules_do_not_overlap_on_grid():
    rep = coverage_report(resolution=0.01)
    assert rep.overlap_fraction == 0.0
    assert sum(rep.matched.values()) + rep.indeterminate == pytest.approx(1.0)


def test_tautology_rule_covers_everything():
    always = ThresholdRule(1, "Any", (Condition("NTP", ">=", 0.0),), "none", 0)
    rep = coverage_report((always,), resolution=0.05)
    assert rep.coverage == 1.0
    assert rep.indeterminate == 0.0


def test_priority_resolves_overlap():
    a = ThresholdRule(1, "A", (Condition("NTP", ">=", 0.5),), "a", priority=1)
    b = ThresholdRule(2, "B", (Condition("NTP", ">=", 0.3),), "b", priority=0)
    p = StateProbabilities(0.6, 0.2, 0.2)
    assert classify_state(p, (a, b)).phase == 2
    assert classify_state(p, (b, a)).phase == 2
    rep = coverage_report((a, b), resolution=0.05)
    assert (2, 1) in rep.overlaps
    assert rep.raw_matched[1] > 0 and rep.matched[1] == 0


@given(st.permutations(range(len(DEFAULT_RULES))))
def test_rule_order_does_not_matter(perm):
    rules = tuple(DEFAULT_RULES[i] for i in perm)
    for triple in list(PHASE_TRIPLES.values()) + [(0.40, 0.35, 0.25)]:
        p = StateProbabilities(*triple)
        assert classify_state(p, rules).phase == classify_state(p).phase


@given(st.integers(0, 100), st.integers(0, 100))
def test_classification_total_on_simplex(i, j):
    if i + j > 100:
        i, j = 100 - i, 100 - j
    p = StateProbabilities(i / 100, j / 100, (100 - i - j) / 100)
    d = classify_state(p)
    assert d.phase == INDETERMINATE or 1 <= d.phase <= 6


def test_simplex_grid_rows_sum_to_one():
    g = simplex_grid(0.1)
    assert g.shape == (66, 3)
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-12)


# smoothing


def test_smoothing_k1_is_identity():
    raw = [1, 2, 1, 3, 3, 5, 1, INDETERMINATE]
    assert smooth_state(raw, k=1) == raw


def test_smoothing_suppresses_flicker():
    raw = [1, 1, 1, 2, 1, 1, 2, 2, 2]
    assert smooth_state(raw, k=2) == [1, 1, 1, 1, 1, 1, 1, 2, 2]
    assert smooth_state(raw, k=3) == [1, 1, 1, 1, 1, 1, 1, 1, 2]


def test_critical_bypasses_smoothing():
    raw = [1, 1, 5, 1, 1, 1]
    assert smooth_state(raw, k=3) == [1, 1, 5, 5, 5, 1]
    assert smooth_state(raw, k=3, bypass=()) == [1] * 6


def test_smoothing_rejects_bad_k():
    with pytest.raises(ValueError):
        smooth_state([1], k=0)


@given(st.lists(st.sampled_from([1, 2, 3, 4, 6, INDETERMINATE]), min_size=1, max_size=40), st.integers(1, 5))
def test_smoothed_values_come_from_raw(raw, k):
    out = smooth_state(raw, k=k)
    assert len(out) == len(raw)
    assert out[0] == raw[0]
    assert set(out) <= set(raw)
    # changes happen only after k agreeing samples
    for t in range(1, len(out)):
        if out[t] != out[t - 1]:
            assert len(set(raw[max(0, t - k + 1): t + 1])) == 1 and t + 1 >= k


# rule files


def test_rules_round_trip():
    again = parse_rules(format_rules())
    assert again == tuple(sorted(DEFAULT_RULES, key=lambda r: r.phase))


def test_rules_file(tmp_path):
    path = tmp_path / "rules.txt"
    path.write_text(
        "# two-phase table\n"
        "phase5.name = Critical\n"
        "phase5.when = P(HTP) >= 0.7 & P(NTP) <= 0.1\n"
        "phase1.when = NTP >= 0.8\n",
        encoding="utf-8",
    )
    rules = load_rules(path)
    assert [r.phase for r in rules] == [1, 5]
    assert rules[0].name == "Phase 1"
    assert classify_state(StateProbabilities(0.1, 0.1, 0.8), rules).phase == 5


@pytest.mark.parametrize(
    "text,line",
    [
        ("phase1.when = P(NTP) >= 1.2\n", 1),
        ("phase1.name = x\nphase1.when = P(XYZ) >= 0.2\n", 2),
        ("phase7.when = P(NTP) >= 0.2\n", 1),
        ("phase1.when = P(NTP) >= 0.2\nphase1.priority = high\n", 2),
        ("phase1.name = lonely\n", 1),
        ("nonsense\n", 1),
    ],
)
def test_bad_rules_raise_with_line(text, line):
    with pytest.raises(RuleConfigError) as exc:
        parse_rules(text)
    assert exc.value.line == line


def test_empty_rules_rejected():
    with pytest.raises(RuleConfigError):
        parse_rules("# nothing\n")


def test_condition_bounds_checked():
    with pytest.raises(RuleConfigError):
        Condition("HTP", ">=", 1.2)
    with pytest.raises(RuleConfigError):
        Condition("HTP", "==", 0.2)


def test_permuted_default_priorities_give_same_grid():
    base = coverage_report(resolution=0.02).matched
    for perm in itertools.islice(itertools.permutations(DEFAULT_RULES), 0, 720, 97):
        assert coverage_report(perm, resolution=0.02).matched == base
