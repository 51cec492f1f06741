"""Run configuration: defaults, strict JSON loading, and flag precedence.

Defaults are the full-scale training recipe (flow: batch 64, AdamW at
1e-4, no weight decay; autoencoder: batch 16, 6e-5, weight decay 1e-3);
desk-scale runs override step counts and sizes in their config files.
Parsing is strict: an unknown key anywhere fails with its dotted path.
Precedence is CLI flag > config file > built-in default, and the
``config`` subcommand echoes the fully resolved result.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .autoencoder import AutoencoderConfig
from .errors import ConfigError
from .network import ModelConfig


@dataclass(frozen=True)
class SamplerSettings:
    steps: int = 50
    integrator: str = "euler"
    cfg_scale: float = 1.0


@dataclass(frozen=True)
class FlowTrainingConfig:
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 0.0
    steps: int = 200_000
    dropout_prob: float = 0.1
    checkpoint_every: int = 1000
    use_sampled_latents: bool = False
    augment_enabled: bool = True
    augment_out_px: int = 256
    augment_scale_max: float = 1.5


@dataclass(frozen=True)
class VaeTrainingConfig:
    batch_size: int = 16
    lr: float = 6e-5
    weight_decay: float = 1e-3
    steps: int = 200_000
    checkpoint_every: int = 1000


@dataclass(frozen=True)
class DataPaths:
    train_manifest: str | None = None
    val_manifest: str | None = None


@dataclass(frozen=True)
class CheckpointPaths:
    thermal_vae: str | None = None
    rgb_vae: str | None = None
    flow: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    schedule: str = "linear"
    styles: tuple[str, ...] = ("synthA", "synthB")
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    thermal_autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    rgb_autoencoder: AutoencoderConfig = field(
        default_factory=lambda: AutoencoderConfig(channels_in=3)
    )
    flow_training: FlowTrainingConfig = field(default_factory=FlowTrainingConfig)
    vae_training: VaeTrainingConfig = field(default_factory=VaeTrainingConfig)
    data: DataPaths = field(default_factory=DataPaths)
    checkpoints: CheckpointPaths = field(default_factory=CheckpointPaths)


_SECTIONS = {
    "model": ModelConfig,
    "sampler": SamplerSettings,
    "thermal_autoencoder": AutoencoderConfig,
    "rgb_autoencoder": AutoencoderConfig,
    "flow_training": FlowTrainingConfig,
    "vae_training": VaeTrainingConfig,
    "data": DataPaths,
    "checkpoints": CheckpointPaths,
}


def _build_section(cls, current, values: dict, prefix: str):
    known = {f.name for f in fields(cls)}
    merged = {f.name: getattr(current, f.name) for f in fields(cls)}
    for key, val in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        if key == "hidden":
            val = tuple(val)
        merged[key] = val
    try:
        return cls(**merged)
    except TypeError as e:
        raise ConfigError(f"invalid value in section '{prefix.rstrip('.')}': {e}") from e


def config_from_dict(raw: dict, base: RunConfig | None = None) -> RunConfig:
    """Overlay a raw dict onto defaults (or an existing config), strictly."""
    base = base or RunConfig()
    top_known = {f.name for f in fields(RunConfig)}
    merged = {f.name: getattr(base, f.name) for f in fields(RunConfig)}
    for key, val in raw.items():
        if key not in top_known:
            raise ConfigError(f"unknown config key: {key}")
        if key in _SECTIONS:
            if not isinstance(val, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            merged[key] = _build_section(_SECTIONS[key], merged[key], val, f"{key}.")
        elif key == "styles":
            merged[key] = tuple(val)
        else:
            merged[key] = val
    return RunConfig(**merged)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config_from_dict(raw)


def apply_overrides(cfg: RunConfig, dotted: dict) -> RunConfig:
    """Apply {'sampler.steps': 10, 'seed': 3}-style overrides (CLI flags)."""
    tree: dict = {}
    for key, val in dotted.items():
        if val is None:
            continue
        parts = key.split(".")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = val
    return config_from_dict(tree, base=cfg)


def config_to_dict(cfg: RunConfig) -> dict:
    out = asdict(cfg)
    out["styles"] = list(cfg.styles)
    out["model"] = asdict(cfg.model)
    out["thermal_autoencoder"]["hidden"] = list(cfg.thermal_autoencoder.hidden)
    out["rgb_autoencoder"]["hidden"] = list(cfg.rgb_autoencoder.hidden)
    return out


def resolve_path(base_dir: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base_dir / p


def require(value, what: str):
    if value is None:
        raise ConfigError(f"{what} is required but not set (config file or flag)")
    return value
