"""Meta-label supervised contrastive loss on unit-norm global embeddings."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

UNIT_TOL = 1e-9


class NoPositivePairsError(ValueError):
    """Every anchor in the batch has a unique meta-label."""


@dataclass
class ConConfig:
    tau: float = 0.1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


def supcon_loss(z, meta: Sequence[int], cfg: ConConfig | None = None) -> Tensor:
    """Average over anchors with at least one positive of the mean positive log-likelihood.

    The denominator for anchor i runs over every a != i, positives included.
    """
    cfg = cfg or ConConfig()
    z = T.as_tensor(z)
    meta = np.asarray(meta)
    n = z.shape[0]
    if z.ndim != 2 or n < 2:
        raise ValueError(f"need a (2N, d) batch with 2N >= 2, got {z.shape}")
    if meta.shape != (n,):
        raise ValueError("one meta-label per row required")
    if np.abs(np.linalg.norm(z.data, axis=1) - 1.0).max() > UNIT_TOL:
        raise ValueError("embedding rows must be unit-norm")

    others = ~np.eye(n, dtype=bool)
    positives = (meta[:, None] == meta[None, :]) & others
    n_pos = positives.sum(axis=1)
    anchors = n_pos > 0
    if not anchors.any():
        raise NoPositivePairsError("no anchor has a positive: all meta-labels are unique")

    logits = T.matmul(z, T.transpose(z)) * (1.0 / cfg.tau)
    shift = np.where(others, logits.data, -np.inf).max(axis=1, keepdims=True)
    shifted = logits - shift
    denom = T.sum(T.exp(shifted) * others, axis=1, keepdims=True)
    log_prob = shifted - T.log(denom)
    weights = np.where(positives, 1.0 / np.maximum(n_pos, 1)[:, None], 0.0) * anchors[:, None]
    return -T.sum(log_prob * weights) * (1.0 / anchors.sum())


def meta_label(slice_index: int, slices_per_volume: int, partitions: int) -> int:
    """Partition index of a slice when a volume is cut into ``partitions`` equal slabs."""
    if partitions < 1:
        raise ValueError("partitions must be >= 1")
    if not 0 <= slice_index < slices_per_volume:
        raise ValueError(f"slice index {slice_index} outside [0, {slices_per_volume})")
    return slice_index * partitions // slices_per_volume
