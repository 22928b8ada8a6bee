"""Synthetic short-axis-like volumes with exact masks, and the transform family.

Each volume is a short stack of slices showing a bright disk (class 1), a
surrounding annulus (class 2) and a crescent beside them (class 3).  Geometry
drifts smoothly from slice to slice.  Transforms are gamma curves on intensity
plus exact lattice maps: a dihedral-4 element followed by an integer shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .contrastive import meta_label
from .tensor import Tensor

NUM_CLASSES = 3
CLASS_NAMES = ("lv", "myo", "rv")
INTENSITY = {"background": 0.2, "lv": 0.8, "myo": 0.5, "rv": 0.65}
NOISE_SIGMA = 0.03
BIAS_AMPLITUDE = 0.06
GAMMA_RANGE = (0.5, 2.0)
MAX_SHIFT = 4
MIN_EXTENT = 32


# -- generation -----------------------------------------------------------------
class AccessCounter:
    """Counts reads of ground-truth tensors; shared by a dataset and its subsets."""

    def __init__(self):
        self.count = 0


@dataclass
class SynthSample:
    image: np.ndarray  # (1, H, W)
    masks: np.ndarray  # (NUM_CLASSES, H, W) bool
    volume_id: int
    slice_index: int
    meta_label: int


@dataclass
class SynthDataset:
    images: np.ndarray  # (N, 1, H, W)
    _masks: np.ndarray = field(repr=False)  # (N, NUM_CLASSES, H, W) bool
    volume_id: np.ndarray
    slice_index: np.ndarray
    slices_per_volume: int
    partitions: int = 3
    counter: AccessCounter = field(default_factory=AccessCounter, repr=False)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def masks(self) -> np.ndarray:
        self.counter.count += 1
        return self._masks

    def labels(self) -> np.ndarray:
        """(N, H, W) class index map, 0 = background."""
        m = self.masks
        return (m * np.arange(1, NUM_CLASSES + 1)[None, :, None, None]).sum(axis=1)

    @property
    def meta_labels(self) -> np.ndarray:
        return np.array([meta_label(int(s), self.slices_per_volume, self.partitions) for s in self.slice_index])

    @property
    def volumes(self) -> np.ndarray:
        return np.unique(self.volume_id)

    def sample(self, i: int) -> SynthSample:
        return SynthSample(
            self.images[i], self.masks[i], int(self.volume_id[i]), int(self.slice_index[i]), int(self.meta_labels[i])
        )

    def subset(self, volumes: Sequence[int]) -> "SynthDataset":
        """Slices of the given volumes, in dataset order; shares the access counter."""
        keep = np.isin(self.volume_id, np.asarray(volumes))
        return SynthDataset(
            self.images[keep],
            self._masks[keep],
            self.volume_id[keep],
            self.slice_index[keep],
            self.slices_per_volume,
            self.partitions,
            self.counter,
        )


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _bias_field(rng, H, W):
    yy, xx = np.mgrid[0:H, 0:W] / np.array([H, W])[:, None, None]
    field_ = np.zeros((H, W))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.2, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return BIAS_AMPLITUDE * field_ / 3.0


def _volume(rng, slices, H, W):
    size = min(H, W)
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = H / 2 + rng.uniform(-0.06, 0.06) * size
    cx = W / 2 + rng.uniform(-0.06, 0.06) * size
    r_lv = rng.uniform(0.10, 0.13) * size
    wall = rng.uniform(0.045, 0.06) * size
    side = rng.choice([-1.0, 1.0])
    angle = rng.uniform(-0.5, 0.5)
    shrink = rng.uniform(0.25, 0.4)
    drift = rng.uniform(-0.03, 0.03, size=2) * size
    bias = _bias_field(rng, H, W)

    images = np.empty((slices, 1, H, W))
    masks = np.zeros((slices, NUM_CLASSES, H, W), dtype=bool)
    for s in range(slices):
        t = s / max(slices - 1, 1)
        scale = 1.0 - shrink * t
        ccy, ccx = cy + drift[0] * t, cx + drift[1] * t
        r1 = r_lv * scale
        r2 = r1 + wall * (0.8 + 0.2 * scale)
        lv = _disk(yy, xx, ccy, ccx, r1)
        myo = _disk(yy, xx, ccy, ccx, r2) & ~lv
        # crescent: an offset disk minus a margin around the annulus
        off = r2 * 1.05
        ry = ccy + off * np.sin(angle)
        rx = ccx + side * off * np.cos(angle)
        rv = _disk(yy, xx, ry, rx, r2 * 0.95) & ~_disk(yy, xx, ccy, ccx, r2 + 1.0)
        img = np.full((H, W), INTENSITY["background"])
        img[lv] = INTENSITY["lv"]
        img[myo] = INTENSITY["myo"]
        img[rv] = INTENSITY["rv"]
        img += bias + rng.normal(0.0, NOISE_SIGMA, size=(H, W))
        images[s, 0] = np.clip(img, 0.0, 1.0)
        masks[s] = lv, myo, rv
    return images, masks


def generate(seed: int, n_volumes: int, slices_per_volume: int, H: int, W: int, partitions: int = 3) -> SynthDataset:
    if H < MIN_EXTENT or W < MIN_EXTENT:
        raise ValueError(f"images must be at least {MIN_EXTENT}x{MIN_EXTENT} to fit the structures")
    if n_volumes < 1 or slices_per_volume < 1:
        raise ValueError("need at least one volume and one slice")
    root = np.random.SeedSequence(seed)
    parts = [_volume(np.random.default_rng(child), slices_per_volume, H, W) for child in root.spawn(n_volumes)]
    return SynthDataset(
        images=np.concatenate([p[0] for p in parts]),
        _masks=np.concatenate([p[1] for p in parts]),
        volume_id=np.repeat(np.arange(n_volumes), slices_per_volume),
        slice_index=np.tile(np.arange(slices_per_volume), n_volumes),
        slices_per_volume=slices_per_volume,
        partitions=partitions,
    )


def split_volumes(n_volumes: int, seed: int, n_val: int, n_test: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Disjoint (train, val, test) volume ids, a function of the seed only."""
    if n_val + n_test >= n_volumes:
        raise ValueError("split leaves no training volumes")
    order = np.random.default_rng([seed, 7919]).permutation(n_volumes)
    test, val, train = order[:n_test], order[n_test : n_test + n_val], order[n_test + n_val :]
    return np.sort(train), np.sort(val), np.sort(test)


# -- transforms -----------------------------------------------------------------
def apply_intensity(x, gamma: float):
    if not GAMMA_RANGE[0] <= gamma <= GAMMA_RANGE[1]:
        raise ValueError(f"gamma {gamma} outside {GAMMA_RANGE}")
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if data.min() < 0 or data.max() > 1:
        raise ValueError("gamma correction expects intensities in [0, 1]")
    return T.power(x, gamma) if isinstance(x, Tensor) else data**gamma


@dataclass(frozen=True)
class Geometric:
    """Flip left-right (optional), rotate k quarter turns, then shift by (dy, dx)."""

    k: int = 0
    flip: bool = False
    dy: int = 0
    dx: int = 0

    def __post_init__(self):
        if self.k not in range(4):
            raise ValueError("k must be in 0..3")


IDENTITY = Geometric()


@dataclass(frozen=True)
class TransformSpec:
    gamma: float
    geometric: Geometric


def _map_points(g: Geometric, i, j, H, W):
    """Destination coordinates of source pixel (i, j) under the dihedral part."""
    if g.flip:
        j = W - 1 - j
    for _ in range(g.k):
        # np.rot90: (i, j) -> (W - 1 - j, i), extents swap
        i, j, H, W = W - 1 - j, i, W, H
    return i + g.dy, j + g.dx, H, W


def invert_geometric(g: Geometric) -> Geometric:
    flip, k = (True, g.k) if g.flip else (False, (-g.k) % 4)
    dihedral = Geometric(k, flip)
    # shift of the inverse is minus the dihedral inverse's linear part applied to (dy, dx)
    oy, ox, _, _ = _map_points(dihedral, 0, 0, 64, 64)
    py, px, _, _ = _map_points(dihedral, g.dy, g.dx, 64, 64)
    return Geometric(k, flip, -(py - oy), -(px - ox))


def source_index(g: Geometric, H: int, W: int) -> np.ndarray:
    """Flat source position for every destination pixel, -1 where vacated."""
    if g.k % 2 and H != W:
        raise ValueError("odd quarter turns need square images")
    ii, jj = np.mgrid[0:H, 0:W]
    di, dj, Ho, Wo = _map_points(g, ii.ravel(), jj.ravel(), H, W)
    inside = (di >= 0) & (di < Ho) & (dj >= 0) & (dj < Wo)
    index = np.full(Ho * Wo, -1, dtype=np.int64)
    index[di[inside] * Wo + dj[inside]] = (ii.ravel() * W + jj.ravel())[inside]
    return index


def apply_geometric(t, g: Geometric | Sequence[Geometric]):
    """Apply one transform to every sample of (B, C, H, W), or one per sample.

    Arrays map to arrays; tensors go through a differentiable gather whose
    backward scatters the gradient along the inverse permutation.
    """
    shape = t.shape
    if len(shape) != 4:
        raise ValueError(f"expected (B, C, H, W), got {shape}")
    B, _, H, W = shape
    gs = [g] * B if isinstance(g, Geometric) else list(g)
    if len(gs) != B:
        raise ValueError("one transform per sample required")
    index = np.stack([source_index(gi, H, W) for gi in gs])
    if isinstance(t, Tensor):
        return T.take_pixels(t, index)
    t = np.asarray(t)
    flat = t.reshape(B, shape[1], H * W)
    out = np.take_along_axis(flat, np.maximum(index, 0)[:, None, :], axis=2)
    out = np.where(index[:, None, :] >= 0, out, 0)
    return out.reshape(shape).astype(t.dtype, copy=False)


def valid_mask(g: Geometric | Sequence[Geometric], B: int, H: int, W: int) -> np.ndarray:
    """(B, H, W) 1.0 where a destination pixel has a source, else 0.0."""
    gs = [g] * B if isinstance(g, Geometric) else list(g)
    return np.stack([(source_index(gi, H, W) >= 0).reshape(H, W) for gi in gs]).astype(np.float64)


def sample_transform(rng: np.random.Generator) -> TransformSpec:
    gamma = float(rng.uniform(*GAMMA_RANGE))
    k = int(rng.integers(4))
    flip = bool(rng.integers(2))
    dy, dx = (int(v) for v in rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2))
    return TransformSpec(gamma, Geometric(k, flip, dy, dx))


# -- export ---------------------------------------------------------------------
def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Binary P5 graymap; ``image`` is an integer array in [0, maxval]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM export takes a 2-D image")
    if img.min() < 0 or img.max() > maxval:
        raise ValueError(f"pixel values outside [0, {maxval}]")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + img.astype(np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H, maxval = (int(v) for v in tokens[1:])
    pos += 1
    return np.frombuffer(blob, dtype=np.uint8, count=H * W, offset=pos).reshape(H, W)


def export(dataset: SynthDataset, out_dir, splits: dict[str, Sequence[int]] | None = None) -> Path:
    """Images and per-class masks as PGM files plus an ``index.tsv`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    split_of = {int(v): name for name, vols in (splits or {}).items() for v in vols}
    masks = dataset.masks
    rows = ["volume_id\tslice_index\tmeta_label\tsplit"]
    for i in range(len(dataset)):
        v, s = int(dataset.volume_id[i]), int(dataset.slice_index[i])
        stem = f"v{v:03d}_s{s:02d}"
        write_pgm(out / f"{stem}_image.pgm", np.rint(dataset.images[i, 0] * 255).astype(np.int64))
        for c, name in enumerate(CLASS_NAMES):
            write_pgm(out / f"{stem}_{name}.pgm", masks[i, c].astype(np.int64) * 255)
        rows.append(f"{v}\t{s}\t{meta_label(s, dataset.slices_per_volume, dataset.partitions)}\t{split_of.get(v, '')}")
    (out / "index.tsv").write_text("\n".join(rows) + "\n")
    return out
