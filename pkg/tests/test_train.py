import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imseg import data as D
from imseg import net as N
from imseg import train as TR

TINY_NET = N.NetConfig(depth=2, base_channels=4, K=4, d=8)


@pytest.fixture(scope="module")
def tiny_data():
    return D.generate(11, 6, 5, 32, 32)


# -- schedule ---------------------------------------------------------------------------
def test_lr_schedule_examples():
    assert TR.lr_at(0, 0.01, 10, 30) == 0.01
    assert TR.lr_at(10, 0.01, 10, 30) == pytest.approx(0.1, abs=1e-15)
    assert TR.lr_at(5, 0.01, 10, 30) == pytest.approx(0.055)
    assert TR.lr_at(30, 0.01, 10, 30) == pytest.approx(0.0, abs=1e-15)
    assert TR.lr_at(29, 0.01, 10, 30) < 0.001
    with pytest.raises(ValueError):
        TR.lr_at(-1, 0.01, 10, 30)


@given(st.integers(11, 60), st.floats(1e-4, 1.0), st.floats(1.0, 20.0))
def test_lr_rises_then_falls(epochs, base, mult):
    lrs = [TR.lr_at(e, base, mult, epochs) for e in range(epochs)]
    assert all(a <= b + 1e-15 for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a >= b - 1e-15 for a, b in zip(lrs[10:], lrs[11:]))
    assert max(lrs) == pytest.approx(base * mult)


# -- optimizer ----------------------------------------------------------------------------
def test_zero_lr_leaves_parameters():
    p = {"w": np.arange(3.0)}
    TR.sgd_step(p, {"w": np.ones(3)}, {}, 0.0, 0.9)
    np.testing.assert_array_equal(p["w"], np.arange(3.0))


def test_plain_gradient_step():
    p, g = {"w": np.array([1.0, -2.0])}, {"w": np.array([0.5, 0.25])}
    TR.sgd_step(p, g, {}, 0.1, 0.0)
    np.testing.assert_array_equal(p["w"], np.array([1.0, -2.0]) - 0.1 * g["w"])


def test_two_momentum_steps():
    p, v, g = {"w": np.zeros(2)}, {}, {"w": np.array([1.0, -3.0])}
    for _ in range(2):
        TR.sgd_step(p, g, v, 0.01, 0.9)
    np.testing.assert_allclose(p["w"], -0.01 * g["w"] * 2.9, rtol=1e-15)


def test_sgd_rejects_bad_gradients():
    with pytest.raises(ValueError):
        TR.sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {}, 0.1, 0.9)
    with pytest.raises(FloatingPointError):
        TR.sgd_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0])}, {}, 0.1, 0.9)


def test_clip_grad_norm():
    small = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert TR.clip_grad_norm(small, 10.0) == 5.0
    np.testing.assert_array_equal(small["a"], [3.0])
    big = {"a": np.array([30.0]), "b": np.array([[40.0]])}
    assert TR.clip_grad_norm(big, 5.0) == 50.0
    np.testing.assert_allclose([big["a"][0], big["b"][0, 0]], [3.0, 4.0], rtol=1e-15)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_clipped_norm_never_exceeds_limit(values, limit):
    g = {"w": np.array(values)}
    before = TR.clip_grad_norm(g, limit)
    after = np.linalg.norm(g["w"])
    assert after <= limit * (1 + 1e-12)
    assert after == pytest.approx(min(before, limit), rel=1e-12, abs=1e-300)


def test_config_validation():
    for bad in (dict(alpha=1.5), dict(lam=-1), dict(tau=0), dict(K=1), dict(cc_sign="pos")):
        with pytest.raises(ValueError):
            TR.PretrainConfig(**bad)
    with pytest.raises(ValueError):
        TR.FinetuneConfig(labeled_volume_count=0)
    with pytest.raises(ValueError):
        TR.FinetuneConfig(max_grad_norm=0.0)


# -- metrics ---------------------------------------------------------------------------
def test_dice_examples():
    a = np.zeros(400, bool)
    a[:100] = True
    assert TR.dice(a, a) == 1.0
    assert TR.dice(a, np.roll(a, 100)) == 0.0
    assert TR.dice(a, np.roll(a, 50)) == 0.5
    assert TR.dice(np.zeros(5, bool), np.zeros(5, bool)) == 1.0


def test_evaluate_perfect_prediction(tiny_data, monkeypatch):
    monkeypatch.setattr(TR, "predict", lambda model, params, images: tiny_data.labels())
    vols, scores = TR.evaluate(None, None, tiny_data)
    assert vols.tolist() == list(range(6)) and (scores == 1.0).all()


def test_evaluate_stacks_slices_per_volume(monkeypatch):
    ds = D.generate(2, 2, 3, 32, 32)
    truth = ds.labels()
    pred = truth.copy()
    pred[:3][pred[:3] == 1] = 0  # lose class 1 in volume 0 only
    monkeypatch.setattr(TR, "predict", lambda model, params, images: pred)
    _, scores = TR.evaluate(None, None, ds)
    assert scores[0, 0] == 0.0 and scores[1, 0] == 1.0
    assert (scores[:, 1:] == 1.0).all()


def test_boundary_f_measure():
    y = np.zeros((1, 16, 16), int)
    y[0, 4:12, 4:12] = 1
    assert TR.boundary_f_measure(y, y) == 1.0
    assert TR.boundary_f_measure(np.zeros_like(y), np.zeros_like(y)) == 1.0
    assert TR.boundary_f_measure(np.zeros_like(y), y) == 0.0
    shifted = np.roll(y, 1, axis=2)
    assert TR.boundary_f_measure(shifted, y, tolerance=1) == 1.0
    far = np.roll(y, 6, axis=2)
    assert TR.boundary_f_measure(far, y, tolerance=1) < 1.0


def test_region_boundaries_of_square():
    y = np.zeros((6, 6), int)
    y[2:4, 2:4] = 1
    edge = TR.region_boundaries(y)
    assert edge[2:4, 2:4].all() and edge.sum() == 4 + 8


# -- pre-training ------------------------------------------------------------------------
def tiny_pretrain_cfg(**kw):
    base = dict(K=TINY_NET.K, batch_size=4, epochs=2, iters_per_epoch=3, warmup_epochs=1, seed=5)
    return TR.PretrainConfig(**{**base, **kw})


def test_pretrain_bookkeeping_and_no_label_reads(tiny_data):
    before = tiny_data.counter.count
    _, record = TR.pretrain(tiny_data, tiny_pretrain_cfg(lam=0.7), TINY_NET)
    assert tiny_data.counter.count == before
    assert len(record.rows) == 2 and len(record.steps) == 6
    for con, mi, cc, total in record.steps:
        assert all(math.isfinite(v) for v in (con, mi, cc, total))
        assert abs(total - (con + 0.7 * cc + mi)) <= 1e-12


def test_pretrain_is_reproducible(tiny_data, tmp_path):
    a, ra = TR.pretrain(tiny_data, tiny_pretrain_cfg(), TINY_NET)
    b, rb = TR.pretrain(tiny_data, tiny_pretrain_cfg(), TINY_NET)
    ra.to_csv(tmp_path / "a.csv")
    rb.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_pretrain_rejects_k_mismatch(tiny_data):
    with pytest.raises(ValueError):
        TR.pretrain(tiny_data, tiny_pretrain_cfg(K=5), TINY_NET)


def test_contrastive_loss_only_moves_encoder_path(tiny_data):
    from imseg import tensor as T

    model = N.SegNet(TINY_NET)
    params = N.init_params(TINY_NET, 0)
    theta = N.as_leaves(params)
    rng = np.random.default_rng(0)
    specs = [D.sample_transform(rng) for _ in range(4)]
    with T.Tape() as tape:
        losses, _ = TR.pretrain_losses(model, theta, tiny_data.images[:4], tiny_data.meta_labels[:4], specs,
                                       tiny_pretrain_cfg())
        tape.backward(losses.l_con)
    touched = {k for k, t in theta.items() if t.grad is not None and np.abs(t.grad).sum() > 0}
    assert touched and all(k.startswith(("enc", "bottleneck", N.GLOBAL_PREFIX)) for k in touched), touched


def test_diagonal_mass_grows_at_alpha_one():
    ds = D.generate(0, 20, 5, 32, 32)
    cfg = tiny_pretrain_cfg(alpha=1.0, lam=0.0, epochs=4, iters_per_epoch=20, warmup_epochs=2, base_lr=0.005, batch_size=8)
    model = N.SegNet(TINY_NET)
    start = TR.cluster_diagnostics(model, N.init_params(TINY_NET, cfg.seed), ds, cfg.seed)[1]
    _, record = TR.pretrain(ds, cfg, TINY_NET)
    assert record.rows[-1]["diag_mass"] > start


def test_diverging_run_reports_batch_seed(tiny_data):
    params = N.init_params(TINY_NET, 0)
    params = {k: v * 1e200 for k, v in params.items()}
    with pytest.raises(TR.TrainingDiverged) as info:
        TR.pretrain(tiny_data, tiny_pretrain_cfg(), TINY_NET, init=params)
    assert info.value.batch_seed == (5, 0, 0)
    assert len(info.value.indices) == 4


# -- fine-tuning -------------------------------------------------------------------------
def test_transfer_keeps_backbone_and_refreshes_heads():
    pre = N.init_params(TINY_NET, 3)
    out = TR.transfer(pre, TINY_NET, 9)
    fresh = N.init_params(TINY_NET, 9)
    for k in pre:
        heads = k.startswith((N.SEG_PREFIX, N.CLUSTER_PREFIX, N.GLOBAL_PREFIX))
        assert np.array_equal(out[k], fresh[k] if heads else pre[k])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finetune_loss_decreases(seed):
    ds = D.generate(20 + seed, 4, 5, 32, 32)
    cfg = TR.FinetuneConfig(labeled_volume_count=2, epochs=5, iters_per_epoch=6, batch_size=4, warmup_epochs=2,
                            seed=seed, augment=False, base_lr=0.005)
    _, record = TR.finetune(None, ds.subset([0, 1]), ds.subset([2]), cfg, TINY_NET)
    losses = [r["l_total"] for r in record.rows]
    assert losses[-1] < losses[0]


def test_finetune_returns_best_validation_epoch(monkeypatch):
    ds = D.generate(4, 3, 5, 32, 32)
    cfg = TR.FinetuneConfig(epochs=4, iters_per_epoch=2, batch_size=2, warmup_epochs=1)
    params, record = TR.finetune(None, ds.subset([0]), ds.subset([1]), cfg, TINY_NET)
    val = [np.mean([r[f"val_dsc_c{c}"] for c in (1, 2, 3)]) for r in record.rows]
    assert record.best_epoch == int(np.argmax(val))
    _, scores = TR.evaluate(N.SegNet(TINY_NET), params, ds.subset([1]))
    assert scores.mean() == max(val)


def test_clipping_keeps_fine_tune_on_inflated_features_finite():
    ds = D.generate(4, 3, 5, 32, 32)
    pre = {k: (v * 3.0 if k.endswith(".w") else v) for k, v in N.init_params(TINY_NET, 1).items()}
    cfg = dict(epochs=3, iters_per_epoch=4, batch_size=2, warmup_epochs=1, base_lr=0.01)
    with pytest.raises(TR.TrainingDiverged) as info:
        TR.finetune(pre, ds.subset([0]), ds.subset([1]), TR.FinetuneConfig(max_grad_norm=None, **cfg), TINY_NET)
    assert info.value.batch_seed[:3] == (0, 0, 3)
    _, record = TR.finetune(pre, ds.subset([0]), ds.subset([1]), TR.FinetuneConfig(**cfg), TINY_NET)
    losses = [r["l_total"] for r in record.rows]
    assert all(math.isfinite(v) for v in losses) and losses[-1] < losses[0]


def test_finetune_rejects_empty_labeled_set():
    ds = D.generate(4, 2, 2, 32, 32)
    with pytest.raises(ValueError):
        TR.finetune(None, ds.subset([]), ds.subset([1]), TR.FinetuneConfig(), TINY_NET)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_cross_entropy_of_uniform_logits(seed):
    from imseg import tensor as T

    y = np.random.default_rng(seed).integers(0, 4, (2, 3, 3))
    assert TR.cross_entropy(T.Tensor(np.zeros((2, 4, 3, 3))), y).item() == pytest.approx(math.log(4))
