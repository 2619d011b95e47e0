"""One structured run configuration (JSON) covering every stage.

Unknown keys are rejected so typos fail loudly; every field defaults to the
documented desk-scale value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .distill import DistillConfig
from .finetune import FtConfig
from .model import ModelConfig
from .sampler import AugmentConfig, MultiCropConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    mpp: float = 0.25
    r_o: int = 64
    crops_per_roi: int = 2
    test_fraction: float = 0.25
    ks: tuple[int, ...] = (10, 20, 100, 200, 500)
    weighted_knn: bool = True
    match_radius: float = 6.0       # px at the corpus base MPP
    score_floor: float = 0.5
    suppression_radius: float = 6.0
    probe_epochs: int = 100
    probe_lr: float = 0.01
    ft_epochs: int = 10
    ft_lr: float = 1e-5


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    synth: SynthConfig = field(default_factory=SynthConfig)
    sampler: MultiCropConfig = field(default_factory=MultiCropConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune: FtConfig = field(default_factory=FtConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTION_TYPES = {
    "synth": SynthConfig, "sampler": MultiCropConfig, "model": ModelConfig,
    "distill": DistillConfig, "finetune": FtConfig, "eval": EvalConfig,
    "augment": AugmentConfig,
}


def _tupled(value):
    if isinstance(value, list):
        return tuple(_tupled(v) for v in value)
    return value


def _build(dc_type, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(dc_type)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _SECTION_TYPES.get(name)
        if sub is not None and isinstance(value, dict):
            kwargs[name] = _build(sub, value, f"{path}.{name}")
        else:
            kwargs[name] = _tupled(value)
    try:
        return dc_type(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def run_config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load_run_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from e
    return run_config_from_dict(data)
