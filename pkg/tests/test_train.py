import numpy as np
import pytest

from etfpc.data import default_spec, generate
from etfpc.errors import ValidationError
from etfpc.etf import build_etf, verify_etf
from etfpc.net import batch_features, init_params
from etfpc.train import (ClassCentroids, LinearHead, TrainConfig, TrainResult,
                         compute_centroids, init_for_config, load_history,
                         load_linear_head, nearest_rival, save_history,
                         save_linear_head, train)

TINY = dict(train_counts=[2, 4, 2, 3, 3, 2], test_counts=[1] * 6)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate(default_spec(seed=0, points_per_cloud=32, **TINY))


def quick_config(**kw):
    base = dict(epochs=3, warmup=1, batch_size=4, seed=0, dim=16)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(epochs=5, warmup=6)
    with pytest.raises(ValidationError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValidationError):
        TrainConfig(ce_baseline=True, etf_fixed=True)
    with pytest.raises(ValidationError):
        TrainConfig(ce_baseline=True, fdl_on=False)
    cfg = TrainConfig(etf_fixed=True)
    assert not cfg.effective_rbl and not cfg.effective_fdl


def test_compute_centroids_single_samples(tiny_dataset):
    params = init_params(16, seed=1)
    one_each = []
    seen = set()
    for c in tiny_dataset.train:
        if c.label not in seen:
            one_each.append(c)
            seen.add(c.label)
    cents = compute_centroids(params, one_each, 6)
    feats = batch_features(params, one_each)
    for cloud, feat in zip(one_each, feats):
        assert np.allclose(cents.means[cloud.label], feat, atol=1e-15)


def test_compute_centroids_duplicate_samples(tiny_dataset):
    params = init_params(16, seed=2)
    cloud = tiny_dataset.train[0]
    cents = compute_centroids(params, [cloud, cloud] + tiny_dataset.train[1:], 6)
    feat = batch_features(params, [cloud])[0]
    # duplicated sample dominates nothing: mean of identical features
    k = cloud.label
    own = [c for c in [cloud, cloud] + tiny_dataset.train[1:] if c.label == k]
    assert cents.counts[k] == len(own)


def test_compute_centroids_global_mean_consistency(tiny_dataset):
    params = init_params(16, seed=3)
    cents = compute_centroids(params, tiny_dataset.train, 6)
    weighted = (cents.means * cents.counts[:, None]).sum(axis=0) / cents.counts.sum()
    assert np.max(np.abs(weighted - cents.global_mean)) < 1e-10


def test_compute_centroids_empty_class_raises(tiny_dataset):
    params = init_params(16, seed=4)
    missing = [c for c in tiny_dataset.train if c.label != 3]
    with pytest.raises(ValidationError, match="class 3"):
        compute_centroids(params, missing, 6)


def test_nearest_rival_examples():
    means = np.eye(3)
    cents = ClassCentroids(means=means, global_mean=means.mean(axis=0),
                           counts=np.array([1, 1, 1]), epoch=0)
    h = means[1] + 0.9 * means[2]
    assert nearest_rival(h, cents, own=1) == 2
    # orthogonal to every rival: tie broken toward the lowest rival index
    h = np.array([0.0, 1.0, 0.0])
    assert nearest_rival(h, cents, own=1) == 0


def test_nearest_rival_matches_brute_force():
    rng = np.random.default_rng(5)
    means = rng.standard_normal((6, 8))
    cents = ClassCentroids(means=means, global_mean=means.mean(axis=0),
                           counts=np.ones(6, dtype=int), epoch=0)
    for _ in range(50):
        h = rng.standard_normal(8)
        own = int(rng.integers(0, 6))
        best = max((k for k in range(6) if k != own),
                   key=lambda k: (means[k] @ h) / (np.linalg.norm(means[k])
                                                   * np.linalg.norm(h)) - 1e-12 * k)
        assert nearest_rival(h, cents, own) == best


def test_warmup_only_run_has_zero_fdl(tiny_dataset):
    cfg = quick_config(epochs=3, warmup=3)
    head, params = init_for_config(cfg, 6)
    result = train(cfg, tiny_dataset, head, params)
    assert all(row["fdl_loss"] == 0.0 for row in result.history)


def test_fdl_activates_after_warmup(tiny_dataset):
    cfg = quick_config(epochs=3, warmup=1)
    head, params = init_for_config(cfg, 6)
    result = train(cfg, tiny_dataset, head, params)
    assert result.history[0]["fdl_loss"] == 0.0
    assert any(row["fdl_loss"] != 0.0 for row in result.history[1:])


def test_frozen_head_never_moves(tiny_dataset):
    cfg = quick_config(rbl_on=False)
    head, params = init_for_config(cfg, 6)
    r_before = head.R.copy()
    result = train(cfg, tiny_dataset, head, params)
    assert np.array_equal(result.head.R, r_before)


def test_rbl_moves_head_but_keeps_frame(tiny_dataset):
    cfg = quick_config()
    head, params = init_for_config(cfg, 6)
    r_before = head.R.copy()
    result = train(cfg, tiny_dataset, head, params)
    assert not np.array_equal(result.head.R, r_before)
    assert verify_etf(result.head, tol=1e-8).passed


def test_training_is_bit_reproducible(tiny_dataset):
    cfg = quick_config()
    head, params = init_for_config(cfg, 6)
    r1 = train(cfg, tiny_dataset, head, params)
    head, params = init_for_config(cfg, 6)
    r2 = train(cfg, tiny_dataset, head, params)
    assert np.array_equal(r1.head.R, r2.head.R)
    for (w1, b1), (w2, b2) in zip(
            r1.params.point_layers + r1.params.head_layers,
            r2.params.point_layers + r2.params.head_layers):
        assert np.array_equal(w1, w2) and np.array_equal(b1, b2)
    assert r1.history == r2.history


def test_dot_loss_decreases_over_short_run(tiny_dataset):
    cfg = quick_config(epochs=6, warmup=6)
    head, params = init_for_config(cfg, 6)
    result = train(cfg, tiny_dataset, head, params)
    assert result.history[-1]["dot_loss"] < result.history[0]["dot_loss"]


def test_ce_baseline_history_and_head(tiny_dataset):
    cfg = quick_config(ce_baseline=True, rbl_on=True, fdl_on=True)
    head, params = init_for_config(cfg, 6)
    assert isinstance(head, LinearHead)
    result = train(cfg, tiny_dataset, head, params)
    assert "ce_loss" in result.history[0]
    assert "dot_loss" not in result.history[0]
    assert isinstance(result.head, LinearHead)


def test_head_dataset_mismatch_raises(tiny_dataset):
    cfg = quick_config()
    params = init_params(16, seed=0)
    small_head = build_etf(3, 16, seed=0)
    with pytest.raises(ValidationError):
        train(cfg, tiny_dataset, small_head, params)


def test_history_roundtrip(tmp_path, tiny_dataset):
    cfg = quick_config(epochs=2, warmup=1)
    head, params = init_for_config(cfg, 6)
    result = train(cfg, tiny_dataset, head, params)
    path = tmp_path / "history.csv"
    save_history(result.history, path)
    loaded = load_history(path)
    assert len(loaded) == 2
    for a, b in zip(result.history, loaded):
        assert a["epoch"] == b["epoch"]
        for key in ("dot_loss", "fdl_loss", "clean_acc", "nc1", "sc"):
            assert a[key] == pytest.approx(b[key], abs=0)


def test_linear_head_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    head = LinearHead(W=rng.standard_normal((8, 3)), b=rng.standard_normal(3))
    path = tmp_path / "linear.txt"
    save_linear_head(head, path)
    loaded = load_linear_head(path)
    assert np.array_equal(loaded.W, head.W)
    assert np.array_equal(loaded.b, head.b)
