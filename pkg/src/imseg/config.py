"""Flat ``key = value`` run configuration.

Every key is required and unknown keys are rejected, so a config file fully
determines a run.  :func:`render` writes the resolved values back in a fixed
order; parsing that output yields the same config.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .data import split_volumes
from .net import NetConfig
from .train import FinetuneConfig, PretrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # data
    data_seed: int
    n_volumes: int
    n_val: int
    n_test: int
    slices_per_volume: int
    image_size: int
    # network
    depth: int
    base_channels: int
    K: int
    embed_dim: int
    # pre-training
    seed: int
    alpha: float
    lam: float
    tau: float
    batch_size: int
    epochs: int
    iters_per_epoch: int
    warmup_multiplier: float
    warmup_epochs: int
    base_lr: float
    momentum: float
    cc_radius: int
    cc_sign: str
    partitions: int
    # fine-tuning
    ft_labeled_volumes: int
    ft_epochs: int
    ft_iters_per_epoch: int
    ft_batch_size: int
    ft_warmup_multiplier: float
    ft_warmup_epochs: int
    ft_base_lr: float
    ft_momentum: float
    ft_augment: bool

    def __post_init__(self):
        try:
            self.net()
            self.pretrain()
            self.finetune()
            split_volumes(self.n_volumes, self.data_seed, self.n_val, self.n_test)
        except ValueError as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        if self.ft_labeled_volumes > self.n_volumes - self.n_val - self.n_test:
            raise ConfigError("ft_labeled_volumes exceeds the number of training volumes", "ft_labeled_volumes")

    def net(self) -> NetConfig:
        return NetConfig(self.depth, self.base_channels, self.K, self.embed_dim, num_classes=4)

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(
            alpha=self.alpha, lam=self.lam, tau=self.tau, K=self.K, batch_size=self.batch_size,
            epochs=self.epochs, iters_per_epoch=self.iters_per_epoch, warmup_multiplier=self.warmup_multiplier,
            warmup_epochs=self.warmup_epochs, base_lr=self.base_lr, momentum=self.momentum, seed=self.seed,
            cc_radius=self.cc_radius, cc_sign=self.cc_sign, partitions=self.partitions,
        )

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(
            labeled_volume_count=self.ft_labeled_volumes, epochs=self.ft_epochs,
            iters_per_epoch=self.ft_iters_per_epoch, batch_size=self.ft_batch_size,
            warmup_multiplier=self.ft_warmup_multiplier, warmup_epochs=self.ft_warmup_epochs,
            base_lr=self.ft_base_lr, momentum=self.ft_momentum, seed=self.seed, augment=self.ft_augment,
        )


# "lambda" is the user-facing key; the field is ``lam``
KEY_ALIASES = {"lambda": "lam"}
FIELD_KEYS = {v: k for k, v in KEY_ALIASES.items()}
_TYPES = {f.name: f.type for f in fields(RunConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "bool": _bool}


def keys() -> list[str]:
    return [FIELD_KEYS.get(f.name, f.name) for f in fields(RunConfig)]


def parse(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        name = KEY_ALIASES.get(key, key)
        if name not in _TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'", key)
        if name in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'", key)
        try:
            values[name] = _PARSERS[_TYPES[name]](value)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {value!r}", key) from None
    for key, value in (overrides or {}).items():
        values[KEY_ALIASES.get(key, key)] = value
    for name in _TYPES:
        if name not in values:
            key = FIELD_KEYS.get(name, name)
            raise ConfigError(f"{source}: missing config key '{key}'", key)
    return RunConfig(**values)


def load(path, overrides: dict | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text, str(path), overrides)


def render(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        text = repr(value) if isinstance(value, float) else str(value).lower() if isinstance(value, bool) else str(value)
        lines.append(f"{FIELD_KEYS.get(f.name, f.name)} = {text}")
    return "\n".join(lines) + "\n"


def replace(cfg: RunConfig, **changes) -> RunConfig:
    values = {f.name: getattr(cfg, f.name) for f in fields(RunConfig)}
    values.update({KEY_ALIASES.get(k, k): v for k, v in changes.items()})
    return RunConfig(**values)
