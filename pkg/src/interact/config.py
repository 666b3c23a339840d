"""Model/training configuration, named profiles, and the config digest."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

# section each field is stored under in the nested text form
_SECTIONS = {
    "model": ("d_model", "n_heads", "ffn_dim", "dropout", "l_seg", "l_cross", "l_dec", "l_sync",
              "sync_position", "cls_counts", "joints_per_arm", "chunk_size", "latent_dim",
              "style_layers", "stacking", "pre_norm", "image_size", "image_channels",
              "stem_channels", "use_visual", "use_latent"),
    "training": ("beta", "lr", "batch_size", "steps", "checkpoint_every", "precision", "seed"),
    "inference": ("ensemble_m",),
    "ablation": ("no_cls", "no_cross", "no_sync"),
}

ABLATIONS = ("no-cls", "no-cross", "no-sync")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    ffn_dim: int = 64
    dropout: float = 0.1
    l_seg: int = 1
    l_cross: int = 1
    l_dec: int = 2
    l_sync: int = 1
    sync_position: int = 1
    cls_counts: tuple = (7, 7, 5)
    joints_per_arm: int = 4
    chunk_size: int = 8
    latent_dim: int = 8
    style_layers: int = 1
    stacking: str = "interleaved"
    pre_norm: bool = False
    image_size: int = 64
    image_channels: int = 1
    stem_channels: tuple = (8, 16)
    use_visual: bool = True
    use_latent: bool = True
    beta: float = 10.0
    lr: float = 1e-3
    batch_size: int = 8
    steps: int = 2000
    checkpoint_every: int = 0
    precision: str = "float32"
    seed: int = 0
    ensemble_m: float = 0.01
    no_cls: bool = False
    no_cross: bool = False
    no_sync: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cls_counts", tuple(int(c) for c in self.cls_counts))
        object.__setattr__(self, "stem_channels", tuple(int(c) for c in self.stem_channels))
        self.validate()

    def validate(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.d_model % 4:
            raise ConfigError("d_model must be divisible by 4 (2-D positional encoding)")
        upper = self.l_dec if self.no_sync else self.l_dec - 1
        if not 1 <= self.sync_position <= upper:
            raise ConfigError(
                f"sync_position={self.sync_position} must satisfy 1 <= s < l_dec={self.l_dec}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")
        if len(self.cls_counts) != 3 or min(self.cls_counts) < 0:
            raise ConfigError(f"cls_counts must be three non-negative counts, got {self.cls_counts}")
        if self.stacking not in ("interleaved", "sequential"):
            raise ConfigError(f"unknown stacking mode {self.stacking!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")
        if self.image_size % 8:
            raise ConfigError("image_size must be divisible by 8 (three stride-2 stem blocks)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def action_dim(self) -> int:
        return 2 * self.joints_per_arm

    @property
    def visual_tokens(self) -> int:
        return (self.image_size // 8) ** 2

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def with_ablations(self, names) -> "ModelConfig":
        flags = {}
        for name in names:
            if name not in ABLATIONS:
                raise ConfigError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}")
            flags[name.replace("-", "_")] = True
        return self.replace(**flags)

    def ablations(self) -> list:
        return [a for a in ABLATIONS if getattr(self, a.replace("-", "_"))]

    def to_dict(self) -> dict:
        out = {}
        for section, names in _SECTIONS.items():
            out[section] = {}
            for n in names:
                val = getattr(self, n)
                out[section][n] = list(val) if isinstance(val, tuple) else val
        return out

    @classmethod
    def from_dict(cls, data: dict, base: "ModelConfig | None" = None) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        flat = {}
        for key, val in data.items():
            if isinstance(val, dict):
                for k, v in val.items():
                    flat[k] = v
            else:
                flat[key] = val
        flat.pop("profile", None)
        unknown = set(flat) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = base or cls()
        return base.replace(**flat)

    def to_text(self) -> str:
        return canonical_text(self.to_dict())

    def digest(self) -> int:
        return fnv1a64(self.to_text().encode("utf-8"))


def canonical_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


PROFILES = {
    "desk": ModelConfig(),
    "paper": ModelConfig(
        d_model=512, n_heads=8, ffn_dim=3200, dropout=0.1,
        l_seg=3, l_cross=3, l_dec=4, l_sync=1, sync_position=2,
        cls_counts=(7, 7, 5), joints_per_arm=7, chunk_size=50, latent_dim=32,
        image_channels=3, stem_channels=(64, 128),
        beta=10.0, lr=1e-5, batch_size=8,
    ),
}


def profile(name: str) -> ModelConfig:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def load_config(path, profile_name: str | None = None) -> ModelConfig:
    """Read a nested JSON config; keys override the named (or embedded) profile."""
    data = json.loads(Path(path).read_text())
    base = profile(profile_name or data.get("profile", "desk"))
    return ModelConfig.from_dict(data, base)


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
