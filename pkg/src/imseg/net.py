"""Small U-Net with a cluster projector, a global projector and a segmentation head.

Parameters live in a plain ``dict[str, np.ndarray]``; forward functions take
the same dict with :class:`~imseg.tensor.Tensor` values so the caller decides
what is differentiated.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor

MAGIC = b"IMSEG1"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    depth: int = 3
    base_channels: int = 8
    K: int = 10
    d: int = 32
    num_classes: int = 4

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if min(self.base_channels, self.d, self.num_classes) < 1:
            raise ValueError("channel counts must be positive")

    def widths(self) -> list[int]:
        """Channels per encoder level, then the bottleneck."""
        return [self.base_channels * 2**lvl for lvl in range(self.depth + 1)]


def param_shapes(cfg: NetConfig) -> dict[str, tuple]:
    widths = cfg.widths()
    shapes = {}

    def block(name, cin, cout):
        shapes[f"{name}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.conv1.b"] = (cout,)
        shapes[f"{name}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{name}.conv2.b"] = (cout,)

    cin = 1
    for lvl in range(cfg.depth):
        block(f"enc{lvl}", cin, widths[lvl])
        cin = widths[lvl]
    block("bottleneck", cin, widths[-1])
    below = widths[-1]
    for lvl in reversed(range(cfg.depth)):
        block(f"dec{lvl}", below + widths[lvl], widths[lvl])
        below = widths[lvl]
    c0, cb = widths[0], widths[-1]
    shapes["cluster.w"] = (cfg.K, c0, 1, 1)
    shapes["cluster.b"] = (cfg.K,)
    shapes["seg.w"] = (cfg.num_classes, c0, 1, 1)
    shapes["seg.b"] = (cfg.num_classes,)
    shapes["global.fc1.w"] = (cb, cb)
    shapes["global.fc1.b"] = (cb,)
    shapes["global.fc2.w"] = (cb, cfg.d)
    shapes["global.fc2.b"] = (cfg.d,)
    return shapes


ENCODER_PREFIXES = ("enc", "bottleneck")
GLOBAL_PREFIX = "global."
CLUSTER_PREFIX = "cluster."
SEG_PREFIX = "seg."


def init_params(cfg: NetConfig, seed: int) -> dict[str, np.ndarray]:
    """Fan-in scaled normal weights (He init for leaky-relu), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = shape[0] if name.startswith(GLOBAL_PREFIX) else int(np.prod(shape[1:]))
        gain = 2.0 / (1.0 + T.LEAKY_SLOPE**2)
        params[name] = rng.standard_normal(shape) * np.sqrt(gain / fan_in)
    return params


def _block(x, theta, name):
    x = T.leaky_relu(T.conv2d(x, theta[f"{name}.conv1.w"], theta[f"{name}.conv1.b"], padding=1))
    return T.leaky_relu(T.conv2d(x, theta[f"{name}.conv2.w"], theta[f"{name}.conv2.b"], padding=1))


def standardize(x) -> Tensor:
    """Zero-mean, unit-variance rescaling of each input image.

    Inputs are data, never differentiated, so this runs on the raw array.
    """
    a = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    centered = a - a.mean(axis=(1, 2, 3), keepdims=True)
    return Tensor(centered / (centered.std(axis=(1, 2, 3), keepdims=True) + 1e-5))


class SegNet:
    def __init__(self, cfg: NetConfig):
        self.cfg = cfg

    def check_input(self, x) -> None:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"expected (B, 1, H, W) input, got {x.shape}")
        step = 2**self.cfg.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ValueError(f"input extents {x.shape[2:]} not divisible by {step}")

    def encode(self, x, theta):
        """Returns (bottleneck activation, [skip per level, shallowest first])."""
        self.check_input(x)
        skips = []
        h = standardize(x)
        for lvl in range(self.cfg.depth):
            h = _block(h, theta, f"enc{lvl}")
            skips.append(h)
            h = T.max_pool2x2(h)
        return _block(h, theta, "bottleneck"), skips

    def decode(self, feature, skips, theta) -> Tensor:
        """Full-resolution dense embedding from the last decoder block."""
        if len(skips) != self.cfg.depth:
            raise ValueError("one skip per encoder level required")
        h = feature
        for lvl in reversed(range(self.cfg.depth)):
            up = T.upsample_nearest2x(h)
            if up.shape[2:] != skips[lvl].shape[2:]:
                raise ValueError(f"skip {lvl} has extent {skips[lvl].shape[2:]}, expected {up.shape[2:]}")
            h = _block(T.concat([up, skips[lvl]], axis=1), theta, f"dec{lvl}")
        return h

    def embed(self, x, theta):
        feature, skips = self.encode(x, theta)
        return feature, self.decode(feature, skips, theta)

    def project_clusters(self, s, theta) -> Tensor:
        return T.softmax(T.conv2d(s, theta["cluster.w"], theta["cluster.b"]), axis=1)

    def project_global(self, feature, theta) -> Tensor:
        h = T.global_avg_pool(feature)
        h = T.leaky_relu(T.matmul(h, theta["global.fc1.w"]) + theta["global.fc1.b"])
        h = T.matmul(h, theta["global.fc2.w"]) + theta["global.fc2.b"]
        return T.l2_normalize(h, axis=1)

    def segment_head(self, s, theta) -> Tensor:
        return T.conv2d(s, theta["seg.w"], theta["seg.b"])


def as_leaves(params: dict[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.items()}


# -- checkpoint file ------------------------------------------------------------
def save(params: dict[str, np.ndarray], cfg: NetConfig, path) -> None:
    """Little-endian: magic, five int32 config fields, then named float64 tensors."""
    out = bytearray(MAGIC)
    out += struct.pack("<5i", cfg.depth, cfg.base_channels, cfg.K, cfg.d, cfg.num_classes)
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def load(path, expected: NetConfig | None = None) -> tuple[dict[str, np.ndarray], NetConfig]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an {MAGIC.decode()} checkpoint")
    pos = len(MAGIC)
    try:
        cfg = NetConfig(*struct.unpack_from("<5i", blob, pos))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from None
    pos += 20
    if expected is not None and expected != cfg:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match {expected}")
    params = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            pos += 4 + 4 * rank
            count = int(np.prod(shape))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"{path}: truncated tensor {name}")
            params[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error:
        raise CheckpointError(f"{path}: truncated file") from None
    expected_shapes = param_shapes(cfg)
    if set(params) != set(expected_shapes):
        raise CheckpointError(f"{path}: parameter names do not match the config")
    for name, shape in expected_shapes.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    return params, cfg
