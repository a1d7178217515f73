"""TOML run configuration: [model], [train], [data] sections.

CLI flags override file values; missing sections fall back to defaults.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .model import ModelConfig
from .synth import GeneratorConfig, preset_config
from .train import TrainConfig


@dataclass
class DataConfig:
    preset: str = "uniform"
    train_images: int = 200
    val_images: int = 32
    test_images: int = 32
    seed: int = 0
    generator: dict = field(default_factory=dict)  # GeneratorConfig overrides

    def generator_config(self) -> GeneratorConfig:
        overrides = dict(self.generator)
        for key in ("count_range", "size_range", "classes_per_image", "shapes"):
            if key in overrides and isinstance(overrides[key], list):
                overrides[key] = tuple(overrides[key])
        return preset_config(self.preset, seed=self.seed, **overrides)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)


def _build(cls, section: dict, where: str):
    valid = {f.name for f in fields(cls)}
    unknown = set(section) - valid
    if unknown:
        raise ValueError(f"unknown {where} config keys: {sorted(unknown)}")
    return cls(**section)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a TOML file (optional) and apply per-section override dicts."""
    raw: dict = {}
    if path is not None:
        with open(Path(path), "rb") as f:
            raw = tomllib.load(f)
    merged = {name: dict(raw.get(name, {})) for name in ("model", "train", "data")}
    for name, extra in (overrides or {}).items():
        merged.setdefault(name, {}).update({k: v for k, v in extra.items() if v is not None})
    return RunConfig(
        model=_build(ModelConfig, merged["model"], "model"),
        train=_build(TrainConfig, merged["train"], "train"),
        data=_build(DataConfig, merged["data"], "data"),
    )
