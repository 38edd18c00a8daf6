import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stsheaf.graph import watts_strogatz
from stsheaf.model import ModelConfig, init_params
from stsheaf.training import (
    AdamState,
    EarlyStopping,
    TrainConfig,
    adam_step,
    compute_node_stats,
    default_horizons,
    evaluate,
    inverse_zscore,
    make_windows,
    split_sizes,
    train,
    zscore,
)


def test_window_count():
    splits = make_windows(np.zeros((20, 2, 1)), 12, 3, (1.0, 0.0, 0.0))
    assert [len(s) for s in splits] == [6, 0, 0]


def test_split_floor_then_remainder():
    assert split_sizes(10, (0.7, 0.1, 0.2)) == (7, 1, 2)
    splits = make_windows(np.random.default_rng(0).normal(size=(24, 3)), 12, 3)
    assert [len(s) for s in splits] == [7, 1, 2]


def test_windows_are_stride_one_and_chronological():
    T = 40
    series = np.arange(T, dtype=float)[:, None, None] * np.ones((1, 2, 1))
    tr, va, te = make_windows(series, 4, 2, (0.5, 0.25, 0.25))
    all_targets = np.concatenate([tr.targets, va.targets, te.targets])
    assert np.array_equal(all_targets[:, 0, 0, 0], np.arange(4, 4 + 35))
    assert np.array_equal(all_targets[:, 1, 0, 0], np.arange(5, 5 + 35))
    stats = tr.node_stats
    raw = inverse_zscore(tr.inputs, stats)
    assert np.allclose(raw[3, :, 0, 0], [3, 4, 5, 6])


def test_too_short_series():
    with pytest.raises(ValueError):
        make_windows(np.zeros((10, 2, 1)), 12, 3)


def test_bad_split():
    with pytest.raises(ValueError):
        split_sizes(10, (0.5, 0.5, 0.5))


def test_constant_series_normalizes_to_zero():
    tr, va, te = make_windows(np.full((30, 3, 1), 4.2), 5, 2)
    assert np.all(tr.inputs == 0) and np.all(te.inputs == 0)
    assert np.all(tr.node_stats.std == 1.0)


def test_zscore_population_std():
    stats = compute_node_stats(np.array([1.0, 2.0, 3.0])[:, None, None])
    assert stats.mean.ravel()[0] == 2.0
    assert stats.std.ravel()[0] == pytest.approx(math.sqrt(2 / 3))
    z = zscore(np.array([1.0, 2.0, 3.0])[:, None, None], stats).ravel()
    assert np.allclose(z, [-1.2247448713915890, 0.0, 1.2247448713915890])


def test_zero_variance_guard():
    stats = compute_node_stats(np.full((6, 2, 1), 7.0))
    assert np.all(stats.std == 1.0)
    assert np.all(zscore(np.full((6, 2, 1), 7.0), stats) == 0)


def test_zscore_round_trip():
    x = np.random.default_rng(0).normal(5, 3, size=(50, 4, 1))
    stats = compute_node_stats(x)
    assert np.max(np.abs(inverse_zscore(zscore(x, stats), stats) - x)) <= 1e-10


def test_stats_from_training_split_only():
    rng = np.random.default_rng(1)
    series = rng.normal(size=(100, 3, 1))
    series[60:] += 50.0
    tr, va, te = make_windows(series, 5, 2, (0.5, 0.2, 0.3))
    n_train = len(tr)
    span = series[: n_train + 5 + 2 - 1]
    assert np.allclose(tr.node_stats.mean, span.mean(axis=0))
    assert np.allclose(tr.node_stats.std, span.std(axis=0))
    assert te.node_stats is tr.node_stats


def test_stats_ignore_missing():
    x = np.array([1.0, 2.0, 100.0, 3.0])[:, None, None]
    mask = np.array([True, True, False, True])[:, None, None]
    stats = compute_node_stats(x, mask)
    assert stats.mean.ravel()[0] == 2.0


def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    st_ = AdamState()
    adam_step(p, {"w": np.zeros(2)}, st_, TrainConfig())
    assert p["w"].tolist() == [1.0, -2.0]
    assert np.all(st_.m["w"] == 0) and np.all(st_.v["w"] == 0)


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.5, 1e-3])
    p = {"w": np.zeros(3)}
    cfg = TrainConfig(learning_rate=0.01)
    adam_step(p, {"w": g}, AdamState(), cfg)
    assert np.allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8))
    assert np.allclose(p["w"], -0.01 * np.sign(g), rtol=1e-4)


def scalar_adam_oracle(theta, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(theta)
    return out


def test_adam_quadratic_matches_oracle_and_converges():
    # f = theta^2 / 2 from 0.5, lr 0.02
    p = {"x": np.array([0.5])}
    state, cfg = AdamState(), TrainConfig(learning_rate=0.02)
    ref = scalar_adam_oracle(0.5, lambda t: t, 0.02, 100)
    for k in range(100):
        adam_step(p, {"x": p["x"].copy()}, state, cfg)
        assert p["x"][0] == pytest.approx(ref[k], rel=1e-12, abs=1e-15)
    assert abs(p["x"][0]) <= 1e-3


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(adam_betas=(1.0, 0.9))


def test_evaluate_examples():
    assert evaluate([1.0, 2.0], [1.0, 2.0]).to_json() == {"mae": 0.0, "rmse": 0.0, "mape": 0.0}
    m = evaluate(np.array([2.0, 4.0]), np.array([1.0, 0.0]), np.array([True, False]))
    assert (m.mae, m.rmse, m.mape) == (1.0, 1.0, 100.0)
    with pytest.raises(ValueError):
        evaluate([1.0], [1.0], [False])
    with pytest.raises(ValueError):
        evaluate([1.0, 2.0], [1.0])


def test_evaluate_mape_floor():
    m = evaluate(np.array([1.0, 0.5]), np.array([2.0, 1e-4]))
    assert m.mape == pytest.approx(50.0)
    assert m.mae == pytest.approx((1.0 + 0.4999) / 2)


def test_evaluate_brute_force():
    rng = np.random.default_rng(3)
    p, t = rng.normal(size=(4, 3, 5)), rng.normal(size=(4, 3, 5))
    mask = rng.random(size=t.shape) > 0.3
    m = evaluate(p, t, mask)
    errs, rel = [], []
    for i in np.ndindex(t.shape):
        if mask[i]:
            errs.append(p[i] - t[i])
            if abs(t[i]) >= 1e-3:
                rel.append(abs(p[i] - t[i]) / abs(t[i]))
    assert m.mae == pytest.approx(sum(abs(e) for e in errs) / len(errs), rel=1e-12)
    assert m.rmse == pytest.approx(math.sqrt(sum(e * e for e in errs) / len(errs)), rel=1e-12)
    assert m.mape == pytest.approx(100 * sum(rel) / len(rel), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1e6, 1e6, allow_nan=False))
def test_masked_entries_never_matter(seed, junk):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    mask = rng.random(size=t.shape) > 0.4
    mask[0, 0] = True
    a = evaluate(p, t, mask)
    p2, t2 = p.copy(), t.copy()
    p2[~mask] = junk
    t2[~mask] = -junk
    b = evaluate(p2, t2, mask)
    assert a == b
    assert a.rmse >= a.mae - 1e-15


def test_default_horizons():
    assert default_horizons(3) == [1, 2, 3]
    assert default_horizons(12) == [3, 6, 12]


def test_early_stopping_counter():
    es = EarlyStopping(2)
    assert es.step(1.0, 0)
    assert not es.step(1.0, 1)
    assert not es.should_stop
    assert not es.step(2.0, 2)
    assert es.should_stop and es.best_epoch == 0


def tiny_problem(series, horizon=2, window=4, variant="dynamic"):
    g = watts_strogatz(6, 2, 0.0, seed=0)
    cfg = ModelConfig(embed_dim=4, stalk_dim=2, num_heads=2, num_layers=1, window=window, horizon=horizon, variant=variant)
    splits = make_windows(series, window, horizon, (0.6, 0.2, 0.2))
    return g, cfg, splits


def test_train_at_zero_loss_stops_after_patience():
    series = np.tile(np.arange(6, dtype=float), (40, 1))[:, :, None]
    g, cfg, (tr, va, te) = tiny_problem(series)
    params = {k: np.zeros_like(v) for k, v in init_params(cfg, 6).items()}
    before = {k: v.copy() for k, v in params.items()}
    best, hist = train(params, cfg, g, tr, va, TrainConfig(patience=3, max_epochs=50, batch_size=4))
    assert [r.epoch for r in hist.records] == [0, 1, 2, 3]
    assert hist.stopped_early and hist.best_epoch == 0
    assert all(r.val_mae == 0 for r in hist.records)
    assert all(np.array_equal(best[k], before[k]) for k in before)


def test_train_history_finite_and_deterministic(tmp_path):
    rng = np.random.default_rng(0)
    series = np.sin(np.arange(60)[:, None] / 3.0 + np.arange(6)) + 0.1 * rng.normal(size=(60, 6))
    g, cfg, (tr, va, te) = tiny_problem(series[:, :, None])
    runs = []
    for i in range(2):
        best, hist = train(init_params(cfg, 6, seed=1), cfg, g, tr, va, TrainConfig(max_epochs=4, batch_size=5, seed=2))
        hist.write_csv(tmp_path / f"h{i}.csv")
        runs.append((tmp_path / f"h{i}.csv").read_bytes())
        assert len(hist.records) == 5
        assert all(math.isfinite(r.train_mae) and math.isfinite(r.val_mae) for r in hist.records)
    assert runs[0] == runs[1]
    rows = list(csv.reader(open(tmp_path / "h0.csv")))
    assert rows[0] == ["epoch", "train_mae", "val_mae", "lr"]
    hist.write_timing_csv(tmp_path / "t.csv")
    assert list(csv.reader(open(tmp_path / "t.csv")))[0] == ["epoch", "seconds"]
    assert hist.val_curve[-1] < hist.val_curve[0]


def test_train_target_ratio_stops_early():
    rng = np.random.default_rng(0)
    series = np.sin(np.arange(60)[:, None] / 3.0 + np.arange(6)) + 0.1 * rng.normal(size=(60, 6))
    g, cfg, (tr, va, te) = tiny_problem(series[:, :, None])
    _, hist = train(init_params(cfg, 6, seed=1), cfg, g, tr, va, TrainConfig(max_epochs=30, batch_size=5), target_ratio=0.999)
    assert hist.reached_target
    assert hist.records[-1].val_mae <= 0.999 * hist.records[0].val_mae


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_rejects_empty_and_nonfinite():
    series = np.random.default_rng(0).normal(size=(40, 6, 1))
    g, cfg, (tr, va, te) = tiny_problem(series)
    with pytest.raises(ValueError):
        train(init_params(cfg, 6), cfg, g, tr.subset(slice(0, 0)), va, TrainConfig())
    bad = init_params(cfg, 6)
    bad["out.w"] = bad["out.w"] * 1e308
    with pytest.raises(FloatingPointError):
        train(bad, cfg, g, tr, va, TrainConfig(max_epochs=2))
