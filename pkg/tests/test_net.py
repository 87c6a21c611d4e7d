import numpy as np
import pytest

from etfpc.data import PointCloud
from etfpc.errors import StaleTraceError, ValidationError
from etfpc.etf import build_etf
from etfpc.net import (apply_sgd, backward, batch_features, forward,
                       grads_add, grads_zero, init_params, load_params,
                       predict, save_params)


def random_cloud(rng, n=16):
    return rng.standard_normal((n, 3))


def healthy_instance(seed, n=16, d=8):
    """Instance away from rectifier kinks and pool ties, so central
    differences with step 1e-6 are trustworthy."""
    rng = np.random.default_rng(seed)
    for _ in range(50):
        params = init_params(d, seed=int(rng.integers(1 << 31)))
        pts = random_cloud(rng, n)
        _, tr = forward(params, pts)
        margin_ok = (np.min(np.abs(tr.pre1)) > 1e-4
                     and np.min(np.abs(tr.pre2)) > 1e-4
                     and np.min(np.abs(tr.pre3)) > 1e-4)
        top2 = np.sort(tr.act2, axis=0)[-2:]
        # live channels need a clear pool winner; dead channels (all inputs
        # rectified to zero) are safe because their pre-activations are
        # bounded away from the kink by margin_ok
        pool_ok = np.all((top2[1] - top2[0] > 1e-4) | (top2[1] == 0.0))
        if margin_ok and pool_ok and tr.raw_norm > 1e-3:
            return params, pts
    raise AssertionError("could not draw a healthy instance")


def fd_input_grad(params, pts, g, step=1e-6):
    out = np.zeros_like(pts)
    for i in range(pts.shape[0]):
        for j in range(3):
            hi = pts.copy()
            lo = pts.copy()
            hi[i, j] += step
            lo[i, j] -= step
            out[i, j] = (g @ forward(params, hi)[0] - g @ forward(params, lo)[0]) / (2 * step)
    return out


def mutate_param(params, which, layer, part, idx, delta):
    point = [[w.copy(), b.copy()] for w, b in params.point_layers]
    head = [[w.copy(), b.copy()] for w, b in params.head_layers]
    target = (point if which == "point" else head)[layer][part]
    target.flat[idx] += delta
    from etfpc.net import _make_params
    return _make_params([tuple(l) for l in point], [tuple(l) for l in head])


def assert_close_rel(analytic, fd, rtol=1e-5, atol=1e-8):
    assert np.all(np.abs(analytic - fd) <= rtol * np.abs(fd) + atol), \
        f"max abs diff {np.max(np.abs(analytic - fd))}"


def test_forward_is_permutation_invariant():
    rng = np.random.default_rng(0)
    params = init_params(16, seed=1)
    pts = random_cloud(rng, 64)
    f1, _ = forward(params, pts)
    f2, _ = forward(params, pts[rng.permutation(64)])
    assert np.array_equal(f1, f2)


def test_forward_ignores_duplicated_points():
    rng = np.random.default_rng(1)
    params = init_params(16, seed=2)
    pts = random_cloud(rng, 32)
    f1, _ = forward(params, pts)
    f2, _ = forward(params, np.vstack([pts, pts]))
    assert np.array_equal(f1, f2)


def test_forward_accepts_pointcloud_and_is_unit_norm():
    rng = np.random.default_rng(2)
    params = init_params(8, seed=3)
    cloud = PointCloud(random_cloud(rng, 20), label=0)
    f, trace = forward(params, cloud)
    assert np.linalg.norm(f) == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(trace.feature, f)
    assert np.all(trace.pool_idx >= 0) and np.all(trace.pool_idx < 20)


def test_forward_golden_value_regression():
    # frozen at first build: seeded params + seeded cloud
    params = init_params(4, seed=2024)
    pts = np.random.default_rng(99).standard_normal((12, 3))
    f, _ = forward(params, pts)
    expected = np.array([-0.06929800966147194, -0.2952445510405345,
                         -0.6659085499864364, 0.681611505179302])
    assert np.allclose(f, expected, atol=1e-15)


def test_backward_zero_grad_feature_gives_zero_grads():
    rng = np.random.default_rng(3)
    params = init_params(8, seed=4)
    pts = random_cloud(rng)
    _, trace = forward(params, pts)
    grads, gpts = backward(params, trace, np.zeros(8))
    assert np.all(gpts == 0.0)
    for w, b in grads.point_layers + grads.head_layers:
        assert np.all(w == 0.0) and np.all(b == 0.0)


def test_backward_routes_only_to_pool_winners():
    rng = np.random.default_rng(4)
    params = init_params(8, seed=5)
    pts = random_cloud(rng, 32)
    _, trace = forward(params, pts)
    _, gpts = backward(params, trace, rng.standard_normal(8))
    selected = set(trace.pool_idx.tolist())
    for i in range(32):
        if i not in selected:
            assert np.all(gpts[i] == 0.0)


def test_backward_input_grads_match_finite_differences():
    for seed in range(5):
        params, pts = healthy_instance(seed)
        g = np.random.default_rng(seed + 100).standard_normal(params.d)
        _, trace = forward(params, pts)
        _, gpts = backward(params, trace, g)
        assert_close_rel(gpts, fd_input_grad(params, pts, g))


def test_backward_param_grads_match_finite_differences():
    step = 1e-6
    for seed in range(3):
        params, pts = healthy_instance(seed + 50)
        g = np.random.default_rng(seed + 200).standard_normal(params.d)
        _, trace = forward(params, pts)
        grads, _ = backward(params, trace, g)
        rng = np.random.default_rng(seed + 300)
        for which, layers in (("point", grads.point_layers),
                              ("head", grads.head_layers)):
            for layer, (gw, gb) in enumerate(layers):
                for part, garr in ((0, gw), (1, gb)):
                    # spot-check a subsample of each tensor
                    count = min(25, garr.size)
                    for idx in rng.choice(garr.size, size=count, replace=False):
                        hi = mutate_param(params, which, layer, part, idx, step)
                        lo = mutate_param(params, which, layer, part, idx, -step)
                        fd = (g @ forward(hi, pts)[0] - g @ forward(lo, pts)[0]) / (2 * step)
                        a = garr.flat[idx]
                        assert abs(a - fd) <= 1e-5 * abs(fd) + 1e-8


def test_backward_rejects_stale_trace():
    rng = np.random.default_rng(5)
    params = init_params(8, seed=6)
    pts = random_cloud(rng)
    _, trace = forward(params, pts)
    newer = apply_sgd(params, grads_zero(params), lr=0.1)
    with pytest.raises(StaleTraceError):
        backward(newer, trace, np.zeros(8))


def test_params_are_write_protected():
    params = init_params(8, seed=7)
    with pytest.raises(ValueError):
        params.point_layers[0][0][0, 0] = 1.0


def test_predict_examples():
    head = build_etf(4, 8, seed=0)
    w = head.weights
    assert predict(w[:, 3], head) == 3
    head2 = build_etf(2, 4, seed=1)
    assert predict(-head2.weights[:, 0], head2) == 1
    # exact tie between classes 1 and 2: midpoint feature
    tie = w[:, 1] + w[:, 2]
    assert predict(tie, head) == 1


def test_grads_accumulate_and_sgd_moves_params():
    rng = np.random.default_rng(6)
    params = init_params(8, seed=8)
    pts = random_cloud(rng)
    _, trace = forward(params, pts)
    g1, _ = backward(params, trace, rng.standard_normal(8))
    acc = grads_zero(params)
    grads_add(acc, g1, 0.5)
    grads_add(acc, g1, 0.5)
    assert np.allclose(acc.point_layers[0][0], g1.point_layers[0][0], atol=1e-15)
    stepped = apply_sgd(params, acc, lr=0.1)
    assert not np.array_equal(stepped.point_layers[0][0], params.point_layers[0][0])


def test_batch_features_shape():
    rng = np.random.default_rng(7)
    params = init_params(8, seed=9)
    clouds = [PointCloud(random_cloud(rng), label=i % 2) for i in range(5)]
    feats = batch_features(params, clouds)
    assert feats.shape == (5, 8)


def test_params_roundtrip_and_byte_stability(tmp_path):
    params = init_params(16, seed=10)
    p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
    save_params(params, p1)
    save_params(params, p2)
    assert p1.read_bytes() == p2.read_bytes()
    loaded = load_params(p1)
    for (w, b), (w2, b2) in zip(params.point_layers + params.head_layers,
                                loaded.point_layers + loaded.head_layers):
        assert np.array_equal(w, w2) and np.array_equal(b, b2)


def test_forward_rejects_bad_shape():
    params = init_params(8, seed=11)
    with pytest.raises(ValidationError):
        forward(params, np.zeros((4, 2)))
