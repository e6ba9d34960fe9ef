"""Run configuration: plain ``key = value`` files with ``#`` comments."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    backbone_seed: int = 1234
    # image encoder
    image_size: int = 64
    patch: int = 8
    channels: int = 3
    d: int = 64
    img_layers: int = 8
    img_heads: int = 4
    taps: tuple = (2, 4, 6, 8)
    # text encoder / prompting
    C: int = 64
    txt_layers: int = 6
    txt_heads: int = 4
    context: int = 32
    vocab: str = ""
    r: int = 8
    M: int = 4
    D: int = 3
    # IQM
    heads: int = 4
    iqm_blocks: int = 4
    # scoring / losses
    map_alpha: float = 0.8
    loss_alpha: float = 0.8
    focal_gamma: float = 2.0
    focal_balance: float = 0.25
    dice_eps: float = 1.0
    # optimisation
    epochs: int = 50
    batch: int = 32
    lr: float = 0.001
    adapt_epochs: int = 10
    few_shot_mode: str = "finetune"
    pixel_pooling: str = "pooled"
    # ablations
    disable_cpt: bool = False
    disable_lpt: bool = False
    disable_iqm: bool = False
    disable_query_init: bool = False
    disable_text_xattn: bool = False
    disable_image_xattn: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.image_size % self.patch:
            raise ConfigError("image_size must be divisible by patch")
        if (self.image_size // self.patch) < 2:
            raise ConfigError("patch grid must be at least 2x2")
        taps = tuple(self.taps)
        if len(taps) != 4 or list(taps) != sorted(set(taps)) or taps[-1] != self.img_layers:
            raise ConfigError("taps must be 4 strictly increasing layers ending at img_layers")
        if not 0 <= self.D < self.txt_layers:
            raise ConfigError("D must satisfy 0 <= D < txt_layers")
        for key in ("map_alpha", "loss_alpha"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key} must lie in [0, 1]")
        for key in ("epochs", "batch", "lr", "r", "M", "C", "d", "heads", "iqm_blocks"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.C % 2:
            raise ConfigError("C must be even (query init splits it in halves)")
        if self.few_shot_mode not in ("finetune", "joint"):
            raise ConfigError("few_shot_mode must be 'finetune' or 'joint'")
        if self.pixel_pooling not in ("pooled", "per_image"):
            raise ConfigError("pixel_pooling must be 'pooled' or 'per_image'")

    # ablations act through these two effective weights
    @property
    def effective_map_alpha(self) -> float:
        return 0.0 if self.disable_iqm else self.map_alpha

    @property
    def effective_loss_alpha(self) -> float:
        return 1.0 if self.disable_iqm else self.loss_alpha

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form ---------------------------------------------------------
    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, **overrides) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key] = value
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        kwargs = {key: _coerce(key, value, known[key].default) for key, value in values.items()}
        return cls(**kwargs)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        return cls.loads(Path(path).read_text(), **overrides)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def _coerce(key, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    return value
