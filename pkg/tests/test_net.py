import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imseg import net as N
from imseg import tensor as T

MICRO = N.NetConfig(depth=2, base_channels=2, K=3, d=4, num_classes=2)


def zero_params(cfg):
    return {k: np.zeros(s) for k, s in N.param_shapes(cfg).items()}


def test_config_validation():
    with pytest.raises(ValueError):
        N.NetConfig(depth=1)
    with pytest.raises(ValueError):
        N.NetConfig(K=1)


def test_zero_input_zero_bias_gives_zero_activations():
    cfg = N.NetConfig()
    params = N.init_params(cfg, 0)
    feature, s = N.SegNet(cfg).embed(T.Tensor(np.zeros((1, 1, 16, 16))), N.as_leaves(params, False))
    assert not feature.data.any() and not s.data.any()


def test_shapes_at_default_depth():
    cfg = N.NetConfig()
    model = N.SegNet(cfg)
    theta = N.as_leaves(N.init_params(cfg, 1), False)
    x = T.Tensor(np.random.default_rng(0).random((2, 1, 64, 64)))
    feature, skips = model.encode(x, theta)
    assert feature.shape[2:] == (8, 8)
    assert [s.shape[2] for s in skips] == [64, 32, 16]
    s = model.decode(feature, skips, theta)
    assert s.shape == (2, cfg.base_channels, 64, 64)
    assert model.project_clusters(s, theta).shape == (2, cfg.K, 64, 64)
    assert model.project_global(feature, theta).shape == (2, cfg.d)
    assert model.segment_head(s, theta).shape == (2, cfg.num_classes, 64, 64)


def test_indivisible_input_rejected():
    model = N.SegNet(N.NetConfig())
    with pytest.raises(ValueError):
        model.encode(T.Tensor(np.zeros((1, 1, 20, 20))), N.as_leaves(N.init_params(N.NetConfig(), 0)))
    with pytest.raises(ValueError):
        model.encode(T.Tensor(np.zeros((1, 2, 16, 16))), N.as_leaves(N.init_params(N.NetConfig(), 0)))


def test_mismatched_skips_rejected():
    model = N.SegNet(MICRO)
    theta = N.as_leaves(N.init_params(MICRO, 0), False)
    feature, skips = model.encode(T.Tensor(np.ones((1, 1, 8, 8))), theta)
    with pytest.raises(ValueError):
        model.decode(feature, skips[:1], theta)
    with pytest.raises(ValueError):
        model.decode(feature, [skips[0][:, :, :4, :4], skips[1]], theta)


def test_forward_is_deterministic():
    cfg = N.NetConfig()
    x = T.Tensor(np.random.default_rng(1).random((2, 1, 32, 32)))
    outs = []
    for _ in range(2):
        theta = N.as_leaves(N.init_params(cfg, 7), False)
        _, s = N.SegNet(cfg).embed(x, theta)
        outs.append(N.SegNet(cfg).project_clusters(s, theta).data)
    assert np.array_equal(outs[0], outs[1])


def test_zero_parameters_give_zero_embedding_and_uniform_clusters():
    theta = N.as_leaves(zero_params(MICRO), False)
    model = N.SegNet(MICRO)
    _, s = model.embed(T.Tensor(np.random.default_rng(2).random((1, 1, 8, 8))), theta)
    assert not s.data.any()
    np.testing.assert_allclose(model.project_clusters(s, theta).data, 1 / 3, atol=1e-15)
    logits = model.segment_head(s, theta).data
    np.testing.assert_allclose(T.softmax(T.Tensor(logits), axis=1).data, 0.5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_cluster_field_is_a_simplex(seed):
    rng = np.random.default_rng(seed)
    model = N.SegNet(MICRO)
    theta = N.as_leaves(N.init_params(MICRO, seed % 1000), False)
    _, s = model.embed(T.Tensor(rng.random((2, 1, 8, 8))), theta)
    p = model.project_clusters(s, theta).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    shifted = dict(theta)
    shifted["cluster.b"] = T.Tensor(theta["cluster.b"].data + 3.0)
    assert np.array_equal(model.project_clusters(s, shifted).data.argmax(1), p.argmax(1))


def test_global_projection_is_unit_norm_and_pure():
    model = N.SegNet(MICRO)
    theta = N.as_leaves(N.init_params(MICRO, 3), False)
    feature = T.Tensor(np.random.default_rng(3).standard_normal((3, 8, 2, 2)))
    z = model.project_global(feature, theta).data
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(model.project_global(feature, theta).data, z)


def test_segment_head_is_linear_without_bias():
    model = N.SegNet(MICRO)
    params = N.init_params(MICRO, 4)
    theta = N.as_leaves(params, False)
    s = np.random.default_rng(4).standard_normal((1, 2, 4, 4))
    np.testing.assert_allclose(model.segment_head(T.Tensor(2.5 * s), theta).data,
                               2.5 * model.segment_head(T.Tensor(s), theta).data, atol=1e-12)


def _biased(cfg, seed):
    rng = np.random.default_rng(seed)
    params = N.init_params(cfg, seed)
    return {k: rng.normal(0, 0.1, v.shape) if k.endswith(".b") else v for k, v in params.items()}


def test_embedding_gradient_finite_difference():
    params = _biased(MICRO, 5)
    names = sorted(params)
    model = N.SegNet(MICRO)
    x = T.Tensor(np.random.default_rng(5).random((1, 1, 8, 8)))
    w = T.Tensor(np.random.default_rng(6).standard_normal((1, 2, 8, 8)))

    def f(*ts):
        _, s = model.embed(x, dict(zip(names, ts)))
        return T.sum(s * w)

    r = T.gradient_check(f, [params[n] for n in names], sample_count=100, skip_kinks=True, min_scale=1e-6)
    assert r.checked == 100 and r.max_rel_error <= 1e-4


def test_global_projector_gradient_finite_difference():
    model = N.SegNet(MICRO)
    params = _biased(MICRO, 6)
    names = [n for n in sorted(params) if n.startswith(N.GLOBAL_PREFIX)]
    feature = T.Tensor(np.random.default_rng(7).standard_normal((2, 8, 2, 2)))
    target = T.Tensor(np.random.default_rng(8).standard_normal((2, MICRO.d)))

    def f(*ts):
        return T.sum(model.project_global(feature, dict(zip(names, ts))) * target)

    r = T.gradient_check(f, [params[n] for n in names], sample_count=40, skip_kinks=True, min_scale=1e-6)
    assert r.max_rel_error <= 1e-4


def test_cross_entropy_gradient_on_micro_input():
    from imseg.train import cross_entropy

    params = _biased(MICRO, 9)
    names = sorted(n for n in params if not n.startswith((N.GLOBAL_PREFIX, N.CLUSTER_PREFIX)))
    model = N.SegNet(MICRO)
    x = T.Tensor(np.random.default_rng(9).random((1, 1, 8, 8)))
    y = np.random.default_rng(10).integers(0, 2, (1, 8, 8))

    def f(*ts):
        theta = dict(zip(names, ts))
        _, s = model.embed(x, theta)
        return cross_entropy(model.segment_head(s, theta), y)

    r = T.gradient_check(f, [params[n] for n in names], sample_count=100, skip_kinks=True, min_scale=1e-6)
    assert r.checked == 100 and r.max_rel_error <= 1e-4


def test_init_is_seeded():
    a, b = N.init_params(MICRO, 11), N.init_params(MICRO, 11)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = N.init_params(MICRO, 12)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    params = N.init_params(N.NetConfig(), 13)
    N.save(params, N.NetConfig(), tmp_path / "a.bin")
    loaded, cfg = N.load(tmp_path / "a.bin")
    assert cfg == N.NetConfig()
    assert all(np.array_equal(loaded[k], params[k]) for k in params)
    N.save(loaded, cfg, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.bin").read_bytes().startswith(b"IMSEG1")


def test_load_rejects_mismatches(tmp_path):
    N.save(N.init_params(N.NetConfig(K=10), 0), N.NetConfig(K=10), tmp_path / "k10.bin")
    with pytest.raises(N.CheckpointError):
        N.load(tmp_path / "k10.bin", expected=N.NetConfig(K=20))
    (tmp_path / "bad.bin").write_bytes(b"NOTACHECKPOINT")
    with pytest.raises(N.CheckpointError):
        N.load(tmp_path / "bad.bin")
    blob = (tmp_path / "k10.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(blob[:-100])
    with pytest.raises(N.CheckpointError):
        N.load(tmp_path / "short.bin")


def test_standardize():
    x = np.random.default_rng(14).random((3, 1, 4, 4)) * 0.3 + 0.1
    z = N.standardize(x).data
    np.testing.assert_allclose(z.mean(axis=(1, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=(1, 2, 3)), 1, atol=1e-3)
    assert not N.standardize(np.full((1, 1, 4, 4), 0.5)).data.any()
