"""Run configuration and its flat ``key = value`` text form.

Every :class:`TrainConfig` field and every :class:`~dqlr.losses.LossConfig`
field is a top-level key; unknown keys are rejected by name.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from dqlr.errors import ConfigError
from dqlr.losses import LossConfig
from dqlr.models import CELLS, ModelConfig

CODEBOOK_MODES = ("ema", "kmeans-periodic")


@dataclass(frozen=True)
class TrainConfig:
    window_n: int = 4
    window_stride: int = 1
    n_predict: int = 1
    epochs: int = 40
    max_steps: int = 0  # 0: no cap, run all epochs
    batch: int = 1
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    codebook_mode: str = "ema"
    k: int = 128
    ema_decay: float = 0.99
    kmeans_iters: int = 20
    warmup_epochs: int = 1
    quantizer_enabled: bool = True
    latent_dim: int = 64
    channels: tuple[int, ...] = (32, 64)
    cell: str = "gru"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.codebook_mode not in CODEBOOK_MODES:
            raise ConfigError(f"codebook_mode must be one of {CODEBOOK_MODES}, got {self.codebook_mode!r}")
        if self.window_n < 1 or self.window_stride < 1 or self.batch < 1:
            raise ConfigError("window_n, window_stride and batch must be >= 1")
        if self.n_predict < 0 or self.epochs < 0 or self.max_steps < 0 or self.warmup_epochs < 0:
            raise ConfigError("n_predict, epochs, max_steps and warmup_epochs must be >= 0")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must be in (0, 1)")
        if self.cell not in CELLS:
            raise ConfigError(f"cell must be one of {CELLS}, got {self.cell!r}")
        if self.latent_dim < 1 or any(c < 1 for c in self.channels):
            raise ConfigError("latent_dim and channels must be positive")

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(latent_dim=self.latent_dim, channels=tuple(self.channels), cell=self.cell)


def _hints(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "loss"]
_LOSS_KEYS = [f.name for f in dataclasses.fields(LossConfig)]
KNOWN_KEYS = tuple(_TRAIN_KEYS + _LOSS_KEYS)


def _parse_value(key: str, raw: str, kind) -> object:
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if typing.get_origin(kind) is tuple:
            return tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None
    raise ConfigError(f"{key}: unsupported type {kind}")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def parse_text(text: str) -> dict[str, str]:
    """Raw ``key -> value`` strings; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def from_mapping(values: Mapping[str, object], base: TrainConfig | None = None) -> TrainConfig:
    """Apply string or typed overrides to ``base`` (defaults when omitted)."""
    base = base or TrainConfig()
    unknown = sorted(set(values) - set(KNOWN_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    train_hints, loss_hints = _hints(TrainConfig), _hints(LossConfig)
    train_kw, loss_kw = {}, {}
    for key, value in values.items():
        target, hints = (loss_kw, loss_hints) if key in _LOSS_KEYS else (train_kw, train_hints)
        target[key] = _parse_value(key, value, hints[key]) if isinstance(value, str) else value
    try:
        loss = dataclasses.replace(base.loss, **loss_kw)
        return dataclasses.replace(base, loss=loss, **train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def from_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    return from_mapping(parse_text(text), base)


def load_config(path) -> TrainConfig:
    return from_text(Path(path).read_text(encoding="utf-8"))


def to_text(cfg: TrainConfig) -> str:
    lines = [f"{k} = {_format_value(getattr(cfg, k))}" for k in _TRAIN_KEYS]
    lines += [f"{k} = {_format_value(getattr(cfg.loss, k))}" for k in _LOSS_KEYS]
    return "\n".join(lines) + "\n"
