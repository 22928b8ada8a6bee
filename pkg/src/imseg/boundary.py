"""Edge/entropy alignment: Sobel magnitude, per-pixel cluster entropy and the
windowed squared normalized cross-correlation between them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import EPS, Tensor

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T


@dataclass
class CcConfig:
    radius: int = 4
    eps_var: float = 1e-5
    sign: str = "neg"

    def __post_init__(self):
        if self.radius < 1:
            raise ValueError("window radius must be >= 1")
        if self.sign not in ("neg", "literal"):
            raise ValueError("sign must be 'neg' or 'literal'")


def sobel_edge(x) -> np.ndarray:
    """Sobel gradient magnitude of (B, 1, H, W) images, reflect-padded.

    Returned as a plain array: the edge map is a constant of the objective.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (B, 1, H, W) images, got {x.shape}")
    H, W = x.shape[2:]
    if H < 3 or W < 3:
        raise ValueError("Sobel needs H, W >= 3")
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    # written as differences so flat regions give exactly 0 and the pair stays
    # exactly symmetric under 90-degree rotation
    dx = p[:, :, :, 2:] - p[:, :, :, :-2]
    dy = p[:, :, 2:, :] - p[:, :, :-2, :]
    gx = (dx[:, :, :-2] + dx[:, :, 2:]) + 2.0 * dx[:, :, 1:-1]
    gy = (dy[:, :, :, :-2] + dy[:, :, :, 2:]) + 2.0 * dy[:, :, :, 1:-1]
    return np.sqrt(gx * gx + gy * gy)


def entropy_map(probs, eps: float = EPS) -> Tensor:
    """(B, K, H, W) cluster field -> (B, 1, H, W) per-pixel entropy."""
    probs = T.as_tensor(probs)
    return -T.sum(probs * T.log(probs, eps), axis=1, keepdims=True)


def local_cc(phi, varphi, radius: int, eps_var: float) -> Tensor:
    """Squared normalized cross-correlation for every fully-interior window."""
    phi = np.asarray(phi.data if isinstance(phi, Tensor) else phi, dtype=np.float64)
    varphi = T.as_tensor(varphi)
    if phi.shape != varphi.shape:
        raise ValueError(f"edge map {phi.shape} and entropy map {varphi.shape} differ")
    k = 2 * radius + 1
    if phi.shape[-1] < k or phi.shape[-2] < k:
        raise ValueError(f"image smaller than the {k}x{k} window")
    n = float(k * k)
    # the statistics are shift invariant; centering each image keeps the
    # sum-of-squares minus squared-sum differences from cancelling catastrophically
    phi = phi - phi.mean(axis=(-2, -1), keepdims=True)
    varphi = varphi - T.mean(varphi, axis=(-2, -1), keepdims=True)
    s_phi = T.box_sum(phi, radius).data
    var_phi = T.box_sum(phi * phi, radius).data - s_phi * s_phi / n
    s_v = T.box_sum(varphi, radius)
    s_vv = T.box_sum(varphi * varphi, radius)
    s_pv = T.box_sum(varphi * phi, radius)
    cov = s_pv - s_v * (s_phi / n)
    var_v = s_vv - s_v * s_v * (1.0 / n)
    return cov * cov / ((var_v + eps_var) * (var_phi + eps_var))


def cc_loss(phi, varphi, cfg: CcConfig | None = None) -> Tensor:
    """Mean windowed correlation, negated by default so minimizing aligns boundaries with edges."""
    cfg = cfg or CcConfig()
    cc = T.mean(local_cc(phi, varphi, cfg.radius, cfg.eps_var))
    return -cc if cfg.sign == "neg" else cc
