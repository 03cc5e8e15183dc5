import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mototp.augment import (
    AugmentConfig,
    AugmentResult,
    augment_features,
    benefit_ratio,
    run_experiment,
    write_result,
)
from mototp.layers import ConfigError
from mototp.model import MtpsConfig, MTPSModel
from mototp.synth import GeneratorConfig, generate_corpus
from mototp.training import TrainConfig, prepare_dataset

TINY = MtpsConfig(conv_filters=(8, 16), n_heads=2, key_dim=4, se_reduction=4)


def test_baseline_is_identity(rng):
    x = rng.normal(size=(4, 10, 63))
    out = augment_features(x, None, "baseline")
    np.testing.assert_array_equal(out, x)


def test_oracle_ntp_encoding(rng):
    x = rng.normal(size=(10, 63))
    out = augment_features(x, 2, "oracle")
    assert out.shape == (10, 66)
    np.testing.assert_array_equal(out[:, 63:], np.tile([0.0, 0.0, 1.0], (10, 1)))
    np.testing.assert_array_equal(out[:, :63], x)


def test_oracle_batch_labels(rng):
    x = rng.normal(size=(3, 5, 4))
    out = augment_features(x, [0, 1, 2], "oracle")
    np.testing.assert_array_equal(out[:, 0, 4:], np.eye(3))


def test_predicted_soft_rows_match_model_output(rng):
    model = MTPSModel(replace(TINY, n_features=6), seed=3)
    x = rng.normal(size=(2, 12, 6))
    probs = model.predict_proba(x)
    out = augment_features(x, probs, "predicted")
    for b in range(2):
        tail = out[b, :, 6:]
        np.testing.assert_array_equal(tail, np.broadcast_to(probs[b], tail.shape))
    np.testing.assert_array_equal(out[..., :6], x)


def test_predicted_hard_is_one_hot():
    x = np.zeros((2, 3, 1))
    out = augment_features(x, [[0.2, 0.5, 0.3], [0.6, 0.3, 0.1]], "predicted", hard=True)
    np.testing.assert_array_equal(out[:, 0, 1:], [[0, 1, 0], [1, 0, 0]])


def test_augment_errors(rng):
    x = rng.normal(size=(2, 3, 4))
    with pytest.raises(ConfigError):
        augment_features(x, None, "oracle")
    with pytest.raises(ConfigError):
        augment_features(x, [[0.5, 0.5]] * 2, "predicted")
    with pytest.raises(ConfigError):
        augment_features(x, [0, 1], "label-smoothing")
    with pytest.raises(ValueError):
        augment_features(x, [0, 1, 2], "oracle")


def test_benefit_ratio_examples():
    assert benefit_ratio(0.80, 0.85, 0.90) == pytest.approx(50.0)
    assert benefit_ratio(0.80, 0.90, 0.90) == pytest.approx(100.0)
    assert math.isnan(benefit_ratio(0.80, 0.82, 0.80))
    assert math.isnan(benefit_ratio(0.80, 0.82, 0.79))


@given(
    st.floats(0.0, 0.9), st.floats(0.0, 1.0), st.floats(0.001, 0.1), st.floats(0.01, 100.0)
)
def test_benefit_ratio_scale_free(a_base, frac, gain, scale):
    a_mtps = a_base + frac * gain
    a_oracle = a_base + gain
    eta = benefit_ratio(a_base, a_mtps, a_oracle)
    assert eta == pytest.approx(benefit_ratio(a_base * scale, a_mtps * scale, a_oracle * scale), rel=1e-6, abs=1e-6)
    assert eta == pytest.approx(100 * frac, abs=1e-6)


def test_result_quantities():
    r = AugmentResult({"baseline": [0.70, 0.72], "predicted": [0.74, 0.76], "oracle": [0.76, 0.78]}, (0, 1))
    assert r.delta_max == pytest.approx(0.06)
    assert r.delta_mtps == pytest.approx(0.04)
    assert r.epsilon == pytest.approx(0.02)
    assert r.eta == pytest.approx(200 / 3)
    assert r.diagnostic == ""
    assert "eta        = 66.67%" in r.to_text()
    rows = r.to_csv().splitlines()
    assert rows[0] == "mode,seed,accuracy"
    assert "baseline,mean,0.710000" in rows


def test_result_without_gain_reports_undefined():
    r = AugmentResult({"baseline": [0.7], "predicted": [0.7], "oracle": [0.69]}, (0,))
    assert math.isnan(r.eta)
    assert "undefined" in r.to_text()
    assert "eta" not in AugmentResult({"baseline": [0.7]}, (0,)).to_text()


def test_predicted_mode_needs_upstream():
    with pytest.raises(ConfigError):
        AugmentConfig(modes=("baseline", "predicted"))
    AugmentConfig(modes=("baseline", "oracle"))
    with pytest.raises(ConfigError):
        AugmentConfig(modes=("baseline", "bogus"))
    with pytest.raises(ConfigError):
        AugmentConfig(seeds=())


@pytest.fixture(scope="module")
def tiny_sessions():
    return generate_corpus(GeneratorConfig(rides_per_class=8, duration=128, seed=4))


def _tiny_config(**kw):
    base = dict(
        seeds=(0, 1),
        window=64,
        stride=64,
        train=TrainConfig(max_epochs=2, batch_size=16),
        downstream=replace(TINY, n_classes=2),
    )
    base.update(kw)
    return AugmentConfig(**base)


def test_run_experiment_small(tiny_sessions, tmp_path):
    upstream = {s: MTPSModel(TINY, seed=s) for s in (0, 1)}
    res = run_experiment(_tiny_config(upstream=upstream), sessions=tiny_sessions)
    assert set(res.accuracies) == {"baseline", "predicted", "oracle"}
    assert all(len(v) == 2 for v in res.accuracies.values())
    assert all(0.0 <= a <= 1.0 for v in res.accuracies.values() for a in v)
    write_result(res, tmp_path)
    assert (tmp_path / "augment.csv").read_text().startswith("mode,seed,accuracy")
    assert (tmp_path / "augment_summary.txt").exists()


def test_run_experiment_deterministic(tiny_sessions):
    cfg = _tiny_config(modes=("baseline", "oracle"), seeds=(3,))
    assert run_experiment(cfg, sessions=tiny_sessions).accuracies == run_experiment(cfg, sessions=tiny_sessions).accuracies


def test_run_experiment_needs_collision_labels():
    rides = generate_corpus(GeneratorConfig(rides_per_class=6, duration=64, seed=0, collision=None))
    with pytest.raises(ConfigError):
        run_experiment(_tiny_config(modes=("baseline",), seeds=(0,)), sessions=rides)


def test_missing_seed_in_upstream_map(tiny_sessions):
    ds = prepare_dataset(tiny_sessions, 64, 64, seed=0)
    cfg = _tiny_config(modes=("predicted",), seeds=(0,), upstream={1: MTPSModel(TINY)})
    with pytest.raises(ConfigError):
        run_experiment(cfg, datasets={0: ds})
