import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from mototp.model import MtpsConfig, MTPSModel
from mototp.synth import GeneratorConfig, generate_corpus
from mototp.tensor import NumericError, Tensor
from mototp.training import (
    AdamState,
    PlateauSchedule,
    StratificationError,
    TrainConfig,
    adam_step,
    evaluate_loss,
    prepare_dataset,
    run_ablation,
    stratified_group_split,
    stratified_kfold,
    stratified_split,
    train,
)

TINY = MtpsConfig(conv_filters=(8, 16), n_heads=2, key_dim=4, se_reduction=4)


def toy_data(n=60, T=8, F=5, seed=0):
    r = np.random.default_rng(seed)
    y = np.arange(n) % 3
    X = r.normal(size=(n, T, F)) + y[:, None, None] * 0.8
    return X, y


# --------------------------------------------------------------- splitting


def test_stratified_split_exact_counts():
    labels = np.array([0] * 40 + [1] * 40 + [2] * 20)
    tr, te = stratified_split(labels, 0.8, seed=1)
    assert np.bincount(labels[tr]).tolist() == [32, 32, 16]
    assert np.bincount(labels[te]).tolist() == [8, 8, 4]
    assert not set(tr) & set(te)


def test_stratified_split_deterministic():
    labels = np.arange(90) % 3
    a = stratified_split(labels, 0.7, seed=5)
    b = stratified_split(labels, 0.7, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


@given(st.lists(st.integers(2, 40), min_size=2, max_size=5), st.floats(0.1, 0.9), st.integers(0, 99))
def test_stratified_split_proportions(counts, fraction, seed):
    labels = np.repeat(np.arange(len(counts)), counts)
    tr, te = stratified_split(labels, fraction, seed)
    assert len(tr) + len(te) == len(labels)
    assert not set(tr) & set(te)
    for c, n in enumerate(counts):
        k = int(np.sum(labels[tr] == c))
        assert abs(k - fraction * n) <= 1.0


def test_stratified_split_chi_square():
    r = np.random.default_rng(0)
    labels = r.choice(3, size=10_000, p=[0.5, 0.3, 0.2])
    tr, _ = stratified_split(labels, 0.8, seed=2)
    observed = np.bincount(labels[tr], minlength=3)
    expected = np.bincount(labels, minlength=3) / labels.size * tr.size
    assert sps.chisquare(observed, expected).pvalue > 0.99


def test_stratified_split_rejects_singleton_class():
    with pytest.raises(StratificationError):
        stratified_split([0, 0, 1, 1, 2], 0.8)


def test_kfold_partitions():
    labels = np.arange(50) % 3
    folds = stratified_kfold(labels, 5, seed=0)
    tests = np.concatenate([te for _, te in folds])
    assert sorted(tests.tolist()) == list(range(50))
    for tr, te in folds:
        assert not set(tr) & set(te)


def test_group_split_keeps_groups_whole():
    groups = np.repeat([f"r{i}" for i in range(30)], 4)
    labels = np.repeat(np.arange(30) % 3, 4)
    tr, te = stratified_group_split(labels, groups, 0.8, seed=0)
    assert not set(groups[tr]) & set(groups[te])
    with pytest.raises(StratificationError):
        stratified_group_split(np.array([0, 1]), np.array(["a", "a"]))


# -------------------------------------------------------------------- Adam


def scalar_param(value=1.0):
    return {"w": Tensor(np.array([value]), requires_grad=True)}


def test_adam_zero_gradient_leaves_params():
    p = scalar_param()
    p["w"].grad = np.zeros(1)
    state = AdamState.for_params(p)
    adam_step(p, state, 1e-3)
    assert p["w"].data[0] == 1.0


@pytest.mark.parametrize("g", [0.37, -5.0, 1e-3])
def test_adam_first_step_is_sign(g):
    p = scalar_param()
    p["w"].grad = np.array([g])
    adam_step(p, AdamState.for_params(p), 1e-3)
    assert p["w"].data[0] - 1.0 == pytest.approx(-1e-3 * math.copysign(1, g), rel=1e-4)


def test_adam_converges_on_quadratic():
    target = np.array([0.5, -1.5, 2.0])
    p = {"w": Tensor(np.zeros(3), requires_grad=True)}
    state = AdamState.for_params(p)
    for _ in range(200):
        p["w"].grad = 2 * (p["w"].data - target)
        adam_step(p, state, 0.05)
    for _ in range(300):
        p["w"].grad = 2 * (p["w"].data - target)
        adam_step(p, state, 0.005)
    np.testing.assert_allclose(p["w"].data, target, atol=1e-3)


def test_adam_step_counter_increases():
    p = scalar_param()
    state = AdamState.for_params(p)
    for t in range(1, 4):
        p["w"].grad = np.ones(1)
        adam_step(p, state, 1e-3)
        assert state.t == t


def test_adam_nan_names_parameter():
    p = scalar_param()
    p["w"].grad = np.array([np.nan])
    with pytest.raises(NumericError, match="w"):
        adam_step(p, AdamState.for_params(p), 1e-3)


# ---------------------------------------------------------------- schedule


def test_plateau_from_epoch_one():
    s = PlateauSchedule(1e-3)
    events = []
    for epoch in range(1, 20):
        improved, reduced, stop = s.update(epoch, 1.0)
        events.append((epoch, reduced, stop))
        if stop:
            break
    assert [e for e, r, _ in events if r] == [4]
    assert events[-1][0] == 6 and events[-1][2]
    assert s.lr == 5e-4


def test_min_delta_counts_as_plateau():
    s = PlateauSchedule(1.0)
    s.update(1, 1.0)
    assert s.update(2, 1.0 - 5e-5)[0] is False
    assert s.update(3, 1.0 - 2e-4)[0] is True


@given(st.lists(st.floats(0.0, 2.0), min_size=1, max_size=40))
def test_lr_sequence_non_increasing(losses):
    s = PlateauSchedule(1e-3)
    lrs = [s.lr]
    for e, v in enumerate(losses, start=1):
        s.update(e, v)
        lrs.append(s.lr)
    for a, b in zip(lrs, lrs[1:]):
        assert b == a or b == a * 0.5


def test_train_plateau_schedule_logged():
    X, y = toy_data()
    cfg = TrainConfig(learning_rate=1e-12, max_epochs=20, seed=0, val_fraction=0.0)
    _, log = train(cfg, X, y, model_config=TINY)
    assert len(log.rows) == 6 and log.stopped_early
    assert log.column("lr") == [1e-12] * 4 + [5e-13] * 2


# ---------------------------------------------------------------- training


def test_training_is_deterministic():
    X, y = toy_data()
    cfg = TrainConfig(max_epochs=3, seed=4)
    _, a = train(cfg, X, y, model_config=TINY)
    _, b = train(cfg, X, y, model_config=TINY)
    assert a.to_csv() == b.to_csv()
    _, c = train(TrainConfig(max_epochs=3, seed=5), X, y, model_config=TINY)
    assert c.to_csv() != a.to_csv()


def test_best_checkpoint_restored():
    X, y = toy_data(seed=2)
    Xv, yv = toy_data(n=30, seed=3)
    model, log = train(TrainConfig(max_epochs=8, seed=1), X, y, Xv, yv, model_config=TINY)
    loss, acc = evaluate_loss(model, Xv, yv)
    assert loss == log.best["val_loss"]
    assert acc == log.best["val_acc"]
    assert log.best["val_loss"] == min(log.column("val_loss"))


def test_overfit_small_set():
    X, y = toy_data(n=50, seed=7)
    cfg = TrainConfig(max_epochs=200, seed=0, val_fraction=0.0, early_stop_patience=200, dropout=0.0,
                      learning_rate=3e-3)
    _, log = train(cfg, X, y, model_config=TINY)
    assert min(log.column("train_loss")) < 0.01


def test_non_finite_loss_aborts_with_location():
    X, y = toy_data()
    X[3, 2, 1] = np.nan
    with pytest.raises(NumericError, match="epoch 1, batch"):
        train(TrainConfig(max_epochs=1, seed=0, val_fraction=0.0), X, y, model_config=TINY)


def test_log_csv_columns():
    X, y = toy_data()
    _, log = train(TrainConfig(max_epochs=2), X, y, model_config=TINY)
    lines = log.to_csv().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,val_acc,lr"
    assert len(lines) == 3


def test_config_validation_and_mapping():
    with pytest.raises(ValueError):
        TrainConfig(split_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(variant="nope")
    cfg = TrainConfig.from_mapping({"learning_rate": "0.01", "batch_size": "32", "variant": "no_se"})
    assert cfg.learning_rate == 0.01 and cfg.batch_size == 32 and cfg.variant == "no_se"
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_mapping({"bogus": "1"})
    defaults = TrainConfig()
    assert (defaults.learning_rate, defaults.batch_size, defaults.max_epochs) == (1e-3, 64, 50)
    assert (defaults.early_stop_patience, defaults.lr_plateau_patience, defaults.lr_factor) == (5, 3, 0.5)


# ----------------------------------------------------------------- dataset


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(GeneratorConfig(rides_per_class=10, duration=160, seed=3))


def test_prepare_dataset_splits_by_ride(small_corpus):
    ds = prepare_dataset(small_corpus, T=32, stride=16, seed=0)
    tr, va, te = set(ds.groups_train), set(ds.groups_val), set(ds.groups_test)
    assert not (tr & te) and not (tr & va) and not (va & te)
    assert len(tr | va | te) == 30
    assert ds.X_train.shape[1:] == (32, 63)
    # scaling is fitted on the training windows only
    assert abs(float(ds.X_train[..., 0].mean())) < 1e-9


def test_prepare_dataset_without_holdout(small_corpus):
    ds = prepare_dataset(small_corpus, T=32, stride=16, val_fraction=0.0, holdout=False)
    assert ds.X_test.shape[0] == 0 and ds.X_val.shape[0] == 0
    assert len(set(ds.groups_train)) == 30


def test_ablation_structure(small_corpus):
    ds = prepare_dataset(small_corpus, T=16, stride=16, seed=0)
    cfg = TrainConfig(max_epochs=1, seed=0)
    res = run_ablation(cfg, ds, variants=("full", "conv_only"), seeds=(0,))
    assert res.parameters["full"] > res.parameters["conv_only"]
    assert set(res.accuracies) == {"full", "conv_only"}
    assert all(0.0 <= a <= 1.0 for a in res.accuracies["full"])
