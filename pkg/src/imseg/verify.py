"""Randomized property suite behind ``imseg verify``.

Each property returns its measured worst-case error against a tolerance.
``faults`` injects known bugs so the suite can be shown to fail.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import data as D
from . import net as N
from . import tensor as T
from .boundary import CcConfig, cc_loss, entropy_map
from .clustering import (
    JointMatrix,
    MiConfig,
    entropy,
    joint_distribution,
    mi_kl_form,
    mi_loss,
    modified_joint_entropy,
    proposition1_check,
)
from .contrastive import supcon_loss
from .train import PretrainConfig, pretrain_losses

FAULTS = ("mi-sign",)
GRAD_TOL = 1e-4
GRAD_SAMPLES = 120
# below this both difference quotient and gradient are rounding-dominated at h = 1e-5
NOISE_SCALE = 1e-6


@dataclass
class PropertyResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float = 0.0
    counterexample: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max_error={self.max_error:.3e}  tol={self.tolerance:.0e}  ({self.seconds:.2f}s)"


def _flip_grad(t: T.Tensor) -> T.Tensor:
    # identity forward, negated backward: a sign bug invisible to value checks
    return T.record_op("injected_sign_flip", t.data.copy(), (t,), lambda g: (-g,))


def _mi(faults):
    def loss(p_hat, p_tilde, cfg=None, weights=None):
        out = mi_loss(p_hat, p_tilde, cfg, weights)
        return _flip_grad(out) if "mi-sign" in faults else out

    return loss


def _random_joint(rng, K) -> JointMatrix:
    raw = rng.dirichlet(np.full(K * K, rng.choice([0.2, 1.0, 5.0]))).reshape(K, K)
    P = T.Tensor(raw)
    return JointMatrix(P, T.Tensor(raw.sum(axis=1)), T.Tensor(raw.sum(axis=0)))


def _random_field(rng, B, K, H, W, scale=None):
    scale = rng.uniform(0.1, 6.0) if scale is None else scale
    logits = rng.standard_normal((B, K, H, W)) * scale
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def mi_identity(rng, trials=1000) -> PropertyResult:
    """KL(P || row x col) against H(row) + H(col) - H(P)."""
    worst, example = 0.0, {}
    for _ in range(trials):
        K = int(rng.integers(2, 9))
        J = _random_joint(rng, K)
        kl = mi_kl_form(J)
        ent = (entropy(J.row_marginal) + entropy(J.col_marginal) - entropy(J.P)).item()
        err = abs(kl - ent)
        if err > worst:
            worst, example = err, {"P": J.P.data.tolist()}
    return PropertyResult("mi_identity", worst <= 1e-10, worst, 1e-10, counterexample=example)


def proposition1(rng, trials=1000) -> PropertyResult:
    """log K <= CE(I/K, P) <= mean per-sample CE(u, p_hat) + CE(u, p_tilde)."""
    worst, example = 0.0, {}
    for _ in range(trials):
        K = int(rng.integers(2, 9))
        n = int(rng.integers(1, 65))
        a = _random_field(rng, 1, K, 1, n)
        b = _random_field(rng, 1, K, 1, n)
        J = joint_distribution(a, b)
        log_k, ce, upper = proposition1_check(J, a, b)
        violation = max(log_k - ce, ce - upper, 0.0)
        if violation > worst:
            worst, example = violation, {"p_hat": a.tolist(), "p_tilde": b.tolist()}
    return PropertyResult("proposition1_bounds", worst <= 1e-9, worst, 1e-9, counterexample=example)


def _gradcheck(name, f, params, rng, skip_kinks=False) -> PropertyResult:
    r = T.gradient_check(f, params, h=1e-5, sample_count=GRAD_SAMPLES, rng=rng, skip_kinks=skip_kinks,
                         min_scale=NOISE_SCALE)
    passed = r.max_rel_error <= GRAD_TOL and r.checked >= min(GRAD_SAMPLES, sum(p.size for p in params) // 2)
    return PropertyResult(name, passed, r.max_rel_error, GRAD_TOL,
                          counterexample={"checked": r.checked, "skipped": r.skipped, "shapes": [p.shape for p in params]})


def grad_mi(rng, alpha, faults) -> PropertyResult:
    loss = _mi(faults)
    shape = (2, 5, 4, 4)
    params = [rng.standard_normal(shape), rng.standard_normal(shape)]

    def f(a, b):
        return loss(T.softmax(a, axis=1), T.softmax(b, axis=1), MiConfig(alpha))

    return _gradcheck(f"grad_mi_alpha_{alpha:g}", f, params, rng)


def grad_cc(rng) -> PropertyResult:
    phi = np.abs(rng.standard_normal((2, 1, 12, 12)))
    params = [rng.standard_normal((2, 3, 12, 12))]

    def f(logits):
        return cc_loss(phi, entropy_map(T.softmax(logits, axis=1)), CcConfig())

    return _gradcheck("grad_cc", f, params, rng)


def grad_con(rng) -> PropertyResult:
    meta = np.array([0, 1, 2, 0, 1, 2, 0, 1] * 2)
    params = [rng.standard_normal((16, 8))]

    def f(v):
        return supcon_loss(T.l2_normalize(v, axis=1), meta)

    return _gradcheck("grad_con", f, params, rng)


MICRO_NET = N.NetConfig(depth=2, base_channels=4, K=5, d=8, num_classes=4)


def grad_total(rng, faults) -> PropertyResult:
    """End-to-end gradient of the pre-training objective through a small U-Net.

    Biases are randomized so no unit sits exactly on a leaky-relu kink, and
    coordinates whose probes cross a kink or a pooling switch are replaced.
    """
    model = N.SegNet(MICRO_NET)
    init = N.init_params(MICRO_NET, int(rng.integers(2**31)))
    for name in init:
        if name.endswith(".b"):
            init[name] = rng.normal(0.0, 0.1, init[name].shape)
    names = sorted(init)
    x = D.generate(int(rng.integers(2**31)), 1, 2, 32, 32).images
    specs = [D.sample_transform(rng) for _ in range(2)]
    cfg = PretrainConfig(K=MICRO_NET.K, cc_radius=4)
    meta = np.array([0, 1])

    def f(*tensors):
        theta = dict(zip(names, tensors))
        return pretrain_losses(model, theta, x, meta, specs, cfg, mi_fn=_mi(faults))[0].l_total

    result = _gradcheck("grad_total_micro_net", f, [init[n] for n in names], rng, skip_kinks=True)
    result.counterexample["specs"] = repr(specs)
    return result


def cc_affine(rng, trials=20) -> PropertyResult:
    """An affine image of the edge map correlates perfectly in every window.

    The variance guard costs about eps_var / (window variance), so the edge
    map is given variance well above it.
    """
    worst = 0.0
    for _ in range(trials):
        yy, xx = np.mgrid[0:24, 0:24] / 24.0
        wave = np.sin(2 * np.pi * (rng.uniform(0.5, 2) * yy + rng.uniform(0.5, 2) * xx))
        phi = (2.0 * wave + 0.5 * rng.standard_normal((24, 24)))[None, None]
        a = rng.uniform(1.0, 3.0) * rng.choice([-1, 1])
        loss = cc_loss(phi, T.Tensor(a * phi + rng.uniform(-2, 2))).item()
        worst = max(worst, abs(loss + 1.0))
    return PropertyResult("cc_affine_invariance", worst <= 1e-6, worst, 1e-6)


def equivariance(rng, trials=50) -> PropertyResult:
    """Per-pixel softmax commutes with the lattice transforms on non-vacated pixels."""
    worst = 0.0
    for _ in range(trials):
        s = rng.standard_normal((2, 4, 10, 10)) * 3
        g = D.sample_transform(rng).geometric
        lhs = T.softmax(T.Tensor(D.apply_geometric(s, g)), axis=1).data
        rhs = D.apply_geometric(T.softmax(T.Tensor(s), axis=1).data, g)
        valid = D.valid_mask(g, 2, 10, 10)[:, None].astype(bool).repeat(4, axis=1)
        worst = max(worst, float(np.abs(lhs - rhs)[valid].max()))
    return PropertyResult("softmax_equivariance", worst == 0.0, worst, 0.0)


def special_cases(rng) -> PropertyResult:
    """alpha=0 entropy, one-hot balanced fields, and the trivial contrastive pair."""
    checks = []  # (error, tolerance)
    K = 6
    J = joint_distribution(_random_field(rng, 2, K, 4, 4), _random_field(rng, 2, K, 4, 4))
    checks.append((abs(modified_joint_entropy(J, 0.0).item() - entropy(J.P).item()), 1e-12))
    onehot = np.eye(K)[np.arange(K * 4) % K].T.reshape(1, K, 1, -1)
    Jo = joint_distribution(onehot, onehot)
    checks.append((abs(mi_kl_form(Jo, eps=0.0) - np.log(K)), 1e-9))
    checks.append((float(np.abs(Jo.P.data - np.eye(K) / K).max()), 1e-12))
    z = T.Tensor(np.tile(np.eye(4)[:1], (2, 1)))
    checks.append((abs(supcon_loss(z, [3, 3]).item()), 0.0))
    failed = [i for i, (err, tol) in enumerate(checks) if err > tol]
    worst = max(err for err, _ in checks)
    return PropertyResult("exact_special_cases", not failed, worst, 1e-9, counterexample={"failed_cases": failed})


def suite(faults=()) -> list[tuple[str, Callable]]:
    unknown = set(faults) - set(FAULTS)
    if unknown:
        raise ValueError(f"unknown fault(s): {sorted(unknown)}")
    return [
        ("mi_identity", mi_identity),
        ("proposition1_bounds", proposition1),
        ("grad_mi_alpha_0", lambda rng: grad_mi(rng, 0.0, faults)),
        ("grad_mi_alpha_0.5", lambda rng: grad_mi(rng, 0.5, faults)),
        ("grad_mi_alpha_1", lambda rng: grad_mi(rng, 1.0, faults)),
        ("grad_cc", grad_cc),
        ("grad_con", grad_con),
        ("grad_total_micro_net", lambda rng: grad_total(rng, faults)),
        ("cc_affine_invariance", cc_affine),
        ("softmax_equivariance", equivariance),
        ("exact_special_cases", special_cases),
    ]


def run(seed: int = 0, faults=()) -> list[PropertyResult]:
    results = []
    for i, (_, prop) in enumerate(suite(faults)):
        start = time.perf_counter()
        result = prop(np.random.default_rng([seed, i]))
        result.seconds = time.perf_counter() - start
        results.append(result)
    return results
