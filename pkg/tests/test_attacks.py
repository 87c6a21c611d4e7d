import numpy as np
import pytest

from etfpc.attacks import (AttackConfig, default_attack_config, drop_attack,
                           ifgm, margin_and_grad, pert_attack, run_attack)
from etfpc.data import default_spec, generate
from etfpc.errors import ValidationError
from etfpc.net import forward, predict
from etfpc.train import init_for_config, train, TrainConfig

TINY = dict(train_counts=[2, 4, 2, 3, 3, 2], test_counts=[1] * 6)


@pytest.fixture(scope="module")
def trained():
    """A briefly trained model so margins are meaningful."""
    dataset = generate(default_spec(seed=1, points_per_cloud=48, **TINY))
    cfg = TrainConfig(epochs=8, warmup=8, batch_size=4, seed=0, dim=16)
    head, params = init_for_config(cfg, 6)
    result = train(cfg, dataset, head, params)
    return result.params, result.head, dataset


def test_config_validation():
    with pytest.raises(ValidationError):
        AttackConfig(kind="nope")
    with pytest.raises(ValidationError):
        AttackConfig(kind="ifgm", step=0.0)
    with pytest.raises(ValidationError):
        AttackConfig(kind="ifgm", iters=-1)
    with pytest.raises(ValidationError):
        AttackConfig(kind="drop", drop_rounds=0)


def test_default_configs_carry_standard_settings():
    c = default_attack_config("ifgm")
    assert (c.step, c.iters, c.epsilon) == (0.02, 100, 0.5)
    c = default_attack_config("pert")
    assert (c.step, c.iters, c.dist_weight) == (0.005, 200, 0.5)
    c = default_attack_config("drop")
    assert (c.drop_count, c.drop_rounds) == (25, 5)


def test_margin_sign_matches_prediction(trained):
    params, head, dataset = trained
    for cloud in dataset.test:
        margin, grad, pred = margin_and_grad(params, head, cloud.points, cloud.label)
        assert grad.shape == cloud.points.shape
        assert (margin > 0) == (pred == cloud.label) or margin == 0


def test_ifgm_zero_iters_is_identity(trained):
    params, head, dataset = trained
    cloud = dataset.test[0]
    cfg = AttackConfig(kind="ifgm", step=0.02, iters=0, epsilon=0.5)
    res = ifgm(params, head, cloud, cfg)
    assert np.array_equal(res.cloud.points, cloud.points)
    assert res.perturbation_norm == 0.0


def test_ifgm_respects_epsilon_ball(trained):
    params, head, dataset = trained
    cfg = AttackConfig(kind="ifgm", step=0.05, iters=40, epsilon=0.3)
    for cloud in dataset.test:
        res = ifgm(params, head, cloud, cfg)
        delta = np.linalg.norm(res.cloud.points - cloud.points)
        assert delta <= cfg.epsilon + 1e-9
        assert res.cloud.points.shape == cloud.points.shape


def test_ifgm_is_deterministic(trained):
    params, head, dataset = trained
    cfg = default_attack_config("ifgm")
    a = ifgm(params, head, dataset.test[1], cfg)
    b = ifgm(params, head, dataset.test[1], cfg)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert a.success == b.success


def test_ifgm_flips_some_predictions(trained):
    params, head, dataset = trained
    cfg = default_attack_config("ifgm")
    hits = sum(ifgm(params, head, c, cfg).success for c in dataset.test)
    assert hits >= 1


def test_pert_zero_iters_is_unsuccessful_input(trained):
    params, head, dataset = trained
    cloud = dataset.test[0]
    cfg = AttackConfig(kind="pert", step=0.005, iters=0)
    res = pert_attack(params, head, cloud, cfg)
    assert np.array_equal(res.cloud.points, cloud.points)
    assert not res.success


def test_pert_huge_distance_weight_pins_iterate(trained):
    params, head, dataset = trained
    cloud = dataset.test[0]
    cfg = AttackConfig(kind="pert", step=0.005, iters=30, dist_weight=1e6)
    res = pert_attack(params, head, cloud, cfg)
    assert res.perturbation_norm < 0.05


def test_pert_success_reports_flipping_iterate(trained):
    params, head, dataset = trained
    cfg = default_attack_config("pert")
    for cloud in dataset.test:
        res = pert_attack(params, head, cloud, cfg)
        if res.success:
            feat, _ = forward(params, res.cloud.points)
            assert predict(feat, head) != cloud.label
            assert res.perturbation_norm > 0.0


def test_drop_zero_count_is_identity(trained):
    params, head, dataset = trained
    cloud = dataset.test[0]
    cfg = AttackConfig(kind="drop", drop_count=0, drop_rounds=5)
    res = drop_attack(params, head, cloud, cfg)
    assert np.array_equal(res.cloud.points, cloud.points)


def test_drop_removes_exact_count(trained):
    params, head, dataset = trained
    cloud = dataset.test[2]
    n = cloud.points.shape[0]
    for count, rounds in ((10, 5), (7, 3), (12, 5)):
        cfg = AttackConfig(kind="drop", drop_count=count, drop_rounds=rounds)
        res = drop_attack(params, head, cloud, cfg)
        assert res.cloud.points.shape == (n - count, 3)


def test_drop_refuses_to_empty_the_cloud(trained):
    params, head, dataset = trained
    cloud = dataset.test[0]
    n = cloud.points.shape[0]
    cfg = AttackConfig(kind="drop", drop_count=n - 4, drop_rounds=5)
    with pytest.raises(ValidationError):
        drop_attack(params, head, cloud, cfg)


def test_drop_survivors_are_subset_in_order(trained):
    params, head, dataset = trained
    cloud = dataset.test[3]
    cfg = AttackConfig(kind="drop", drop_count=8, drop_rounds=2)
    res = drop_attack(params, head, cloud, cfg)
    rows = {tuple(r) for r in cloud.points}
    assert all(tuple(r) in rows for r in res.cloud.points)


def test_run_attack_dispatch(trained):
    params, head, dataset = trained
    cloud = dataset.test[0]
    for kind in ("ifgm", "pert", "drop"):
        cfg = default_attack_config(kind)
        if kind == "drop":
            cfg = AttackConfig(kind="drop", drop_count=8, drop_rounds=2)
        res = run_attack(params, head, cloud, cfg)
        assert res.cloud.label == cloud.label
