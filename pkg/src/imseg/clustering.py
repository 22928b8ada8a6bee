"""Joint cluster distribution, entropies and the alpha-mixed mutual-information loss.

A cluster field is a (B, K, H, W) tensor whose per-pixel vectors lie on the
probability simplex.  Every batch x pixel position is one sample of the joint.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import EPS, Tensor

SIMPLEX_TOL = 1e-9


class ZeroDiagonalWarning(RuntimeWarning):
    pass


@dataclass
class MiConfig:
    alpha: float = 0.5
    symmetrize: bool = False
    eps: float = EPS

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class JointMatrix:
    P: Tensor
    row_marginal: Tensor
    col_marginal: Tensor

    @property
    def K(self) -> int:
        return self.P.shape[0]


def check_field(probs, tol: float = SIMPLEX_TOL) -> None:
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if data.ndim != 4:
        raise ValueError(f"cluster field must be (B, K, H, W), got shape {data.shape}")
    if data.shape[1] < 2:
        raise ValueError("cluster field needs K >= 2")
    if (data < -tol).any() or np.abs(data.sum(axis=1) - 1.0).max() > tol:
        raise ValueError("cluster field is not on the probability simplex")


def as_samples(probs: Tensor) -> Tensor:
    """(B, K, H, W) -> (B*H*W, K)."""
    K = probs.shape[1]
    return T.reshape(T.transpose(probs, (0, 2, 3, 1)), (-1, K))


def joint_distribution(p_hat, p_tilde, symmetrize: bool = False, weights: np.ndarray | None = None) -> JointMatrix:
    """Average outer product of paired cluster probabilities.

    ``weights`` (B, H, W) optionally restricts or reweights samples, e.g. to
    drop pixels vacated by a translation; the average is normalized by their sum.
    """
    p_hat, p_tilde = T.as_tensor(p_hat), T.as_tensor(p_tilde)
    if p_hat.shape != p_tilde.shape:
        raise ValueError(f"field shapes differ: {p_hat.shape} vs {p_tilde.shape}")
    check_field(p_hat)
    check_field(p_tilde)
    a, b = as_samples(p_hat), as_samples(p_tilde)
    if weights is None:
        P = T.matmul(T.transpose(a), b) * (1.0 / a.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
        if w.shape[0] != a.shape[0] or (w < 0).any() or w.sum() <= 0:
            raise ValueError("weights must be nonnegative, one per sample, not all zero")
        P = T.matmul(T.transpose(a * (w / w.sum())), b)
    if symmetrize:
        P = (P + T.transpose(P)) * 0.5
    return JointMatrix(P, T.sum(P, axis=1), T.sum(P, axis=0))


def entropy(dist, eps: float = EPS) -> Tensor:
    """-sum p log(p + eps) over every entry, in nats."""
    dist = T.as_tensor(dist)
    if (dist.data < 0).any():
        raise T.DomainError("entropy of a distribution with negative entries")
    return -T.sum(dist * T.log(dist, eps))


def pseudo_joint(K: int) -> np.ndarray:
    return np.eye(K) / K


def modified_joint_entropy(J: JointMatrix, alpha: float, eps: float = EPS) -> Tensor:
    """Joint entropy with its weights blended toward the balanced diagonal target."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    target = (1.0 - alpha) * J.P + alpha * pseudo_joint(J.K)
    return -T.sum(target * T.log(J.P, eps))


def mi_loss(p_hat, p_tilde, cfg: MiConfig | None = None, weights: np.ndarray | None = None) -> Tensor:
    """Mixed joint entropy minus both marginal entropies; at alpha=0 this is -MI."""
    cfg = cfg or MiConfig()
    J = joint_distribution(p_hat, p_tilde, cfg.symmetrize, weights)
    return modified_joint_entropy(J, cfg.alpha, cfg.eps) - entropy(J.row_marginal, cfg.eps) - entropy(
        J.col_marginal, cfg.eps
    )


def mi_kl_form(J: JointMatrix, eps: float = EPS) -> float:
    """KL(P || row x col), with the same eps guard inside every logarithm; zero entries contribute 0."""
    P = J.P.data if isinstance(J.P, Tensor) else np.asarray(J.P)
    rows, cols = P.sum(axis=1), P.sum(axis=0)
    total = 0.0
    for j in range(P.shape[0]):
        for k in range(P.shape[1]):
            if P[j, k] == 0.0:
                continue
            total += P[j, k] * (np.log(P[j, k] + eps) - np.log(rows[j] + eps) - np.log(cols[k] + eps))
    return float(total)


def proposition1_check(J: JointMatrix, p_hat, p_tilde, eps: float = EPS) -> tuple[float, float, float]:
    """(log K, CE(I/K, P), mean per-sample CE(u, p_hat) + CE(u, p_tilde)).

    Both sides use unguarded logarithms so the inequalities hold exactly; a
    zero diagonal entry is reported with a warning and guarded by ``eps``, and
    zero field entries send the upper side to +inf.
    """
    P = J.P.data if isinstance(J.P, Tensor) else np.asarray(J.P)
    K = P.shape[0]
    diag = np.diag(P).copy()
    if (diag <= 0).any():
        warnings.warn("joint matrix has a zero diagonal entry", ZeroDiagonalWarning, stacklevel=2)
        diag = diag + eps
    ce_value = float(-np.log(diag).mean())
    a = np.asarray(p_hat.data if isinstance(p_hat, Tensor) else p_hat)
    b = np.asarray(p_tilde.data if isinstance(p_tilde, Tensor) else p_tilde)
    a = np.moveaxis(a, 1, -1).reshape(-1, K)
    b = np.moveaxis(b, 1, -1).reshape(-1, K)
    with np.errstate(divide="ignore"):
        upper = float((-np.log(a).mean(axis=1) - np.log(b).mean(axis=1)).mean())
    return float(np.log(K)), ce_value, upper


def marginal_perplexity(probs) -> float:
    """exp of the entropy of the mean cluster distribution (effective clusters in use)."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    marginal = data.mean(axis=(0, 2, 3))
    nz = marginal[marginal > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))
