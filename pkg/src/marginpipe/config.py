"""Single-file run configuration shared by every pipeline command.

One JSON document carries a section per stage (phantom, patches, model,
train, focal, refine, data); omitted sections fall back to defaults and
unknown keys are rejected at every level. Command-line flags beat file
values, and each command echoes the configuration it actually ran with
into its output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .ffcl import FocalParams, TrainConfig
from .model import ModelConfig
from .patchflow import PatchSpec
from .phantom import SPLITS, PhantomConfig
from .refinement import RefinementConfig

TRAIN_STAGES = ("local", "global", "finetune")

_SECTION_TYPES = {
    "phantom": PhantomConfig,
    "patches": PatchSpec,
    "model": ModelConfig,
    "focal": FocalParams,
    "refine": RefinementConfig,
}


@dataclass(frozen=True)
class DataSection:
    """Filesystem inputs: the dataset manifest, patch caches, split sizes."""

    manifest: str | None = None
    train_patches: str | None = None
    val_patches: str | None = None
    test_patches: str | None = None
    counts: dict = field(default_factory=lambda: {"train": 20, "val": 4, "test": 6})

    def __post_init__(self):
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise ConfigError(f"unknown splits in data.counts: {sorted(unknown)}")
        for split, n in self.counts.items():
            if not isinstance(n, int) or n < 0:
                raise ConfigError(f"data.counts[{split!r}] must be a non-negative int, got {n!r}")


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    patches: PatchSpec = field(default_factory=PatchSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: dict = field(default_factory=dict)
    focal: FocalParams = field(default_factory=FocalParams)
    refine: RefinementConfig = field(default_factory=RefinementConfig)
    data: DataSection = field(default_factory=DataSection)

    def train_config(self, stage: str, seed: int | None = None) -> TrainConfig:
        """Stage settings = base train section + per-stage overrides + CLI seed."""
        if stage not in TRAIN_STAGES:
            raise ConfigError(f"stage must be one of {TRAIN_STAGES}, got {stage!r}")
        merged = {k: v for k, v in self.train.items() if k not in TRAIN_STAGES}
        merged.update(self.train.get(stage, {}))
        if seed is not None:
            merged["seed"] = seed
        return TrainConfig(stage=stage, **merged)


def _build_section(cls, payload: dict, section: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section '{section}' must be an object, got {type(payload).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in section '{section}': {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, value in payload.items():
        # JSON has no tuples; coerce lists for tuple-typed fields
        if isinstance(getattr(defaults, key), tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def _validate_train_section(payload: dict) -> dict:
    if not isinstance(payload, dict):
        raise ConfigError(f"section 'train' must be an object, got {type(payload).__name__}")
    allowed = {f.name for f in fields(TrainConfig)} - {"stage"}
    for key, value in payload.items():
        if key in TRAIN_STAGES:
            if not isinstance(value, dict):
                raise ConfigError(f"train.{key} must be an object")
            nested_unknown = set(value) - allowed
            if nested_unknown:
                raise ConfigError(f"unknown keys in train.{key}: {sorted(nested_unknown)}")
        elif key not in allowed:
            raise ConfigError(f"unknown key in section 'train': {key!r}")
    return payload


def load_run_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a JSON object at top level")
    known = set(_SECTION_TYPES) | {"train", "data"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    sections = {
        name: _build_section(cls, raw.get(name, {}), name)
        for name, cls in _SECTION_TYPES.items()
    }
    train = _validate_train_section(raw.get("train", {}))
    data = _build_section(DataSection, raw.get("data", {}), "data")
    rc = RunConfig(train=train, data=data, **sections)
    for stage in TRAIN_STAGES:  # surface bad values now, not mid-pipeline
        rc.train_config(stage)
    return rc


def with_seed(rc: RunConfig, seed: int | None) -> RunConfig:
    """Force one seed across data generation, model init, and training."""
    if seed is None:
        return rc
    train = {k: v for k, v in rc.train.items()}
    train["seed"] = seed
    for stage in TRAIN_STAGES:
        if stage in train:
            train[stage] = {k: v for k, v in train[stage].items() if k != "seed"}
    return dataclasses.replace(
        rc,
        phantom=dataclasses.replace(rc.phantom, seed=seed),
        model=dataclasses.replace(rc.model, seed=seed),
        train=train,
    )


def effective_config(rc: RunConfig, extra: dict | None = None) -> dict:
    doc = {
        "phantom": dataclasses.asdict(rc.phantom),
        "patches": dataclasses.asdict(rc.patches),
        "model": dataclasses.asdict(rc.model),
        "train": rc.train,
        "focal": dataclasses.asdict(rc.focal),
        "refine": dataclasses.asdict(rc.refine),
        "data": dataclasses.asdict(rc.data),
    }
    if extra:
        doc["command"] = extra
    return doc


def write_effective_config(
    rc: RunConfig, directory, extra: dict | None = None, name: str = "effective-config.json"
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text(json.dumps(effective_config(rc, extra), sort_keys=True, indent=2) + "\n")
    return path
