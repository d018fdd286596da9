"""Strict JSON run configuration with named, versioned presets.

Unknown keys are rejected with their field path; a fully resolved copy
(defaults filled in) is written next to every run's outputs so that a
run can be audited and reproduced from its directory alone.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .pruning import PruneConfig

DATA_ROOT_ENV = "SPARSEMASK_DATA_ROOT"

METHODS = ("dense", "espn-finetune", "espn-rewind", "snip", "magnitude-lt")


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration field."""


@dataclass(frozen=True)
class DatasetConfig:
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    checksums: dict = field(default_factory=dict)

    def resolved(self, key: str) -> Path:
        """Path for one of the four file slots, under the data root if relative."""
        value = getattr(self, key)
        if not value:
            raise ConfigError(f"dataset.{key} is not set")
        path = Path(value)
        root = os.environ.get(DATA_ROOT_ENV)
        if not path.is_absolute() and root:
            path = Path(root) / path
        return path


@dataclass(frozen=True)
class ScheduleConfig:
    train_epochs: int = 20
    lr: float = 0.1
    milestones: tuple = (10, 15)
    gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    finetune_epochs: int = 20
    finetune_lr: float = 0.001
    finetune_milestones: tuple = (12,)
    pretrain_epochs: int = 10
    warmup_epochs: int = 1
    rewind_epoch: int = 1

    def __post_init__(self):
        for name in ("train_epochs", "finetune_epochs", "pretrain_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"schedule.{name} must be >= 1")
        for name in ("warmup_epochs", "rewind_epoch"):
            if getattr(self, name) < 0:
                raise ConfigError(f"schedule.{name} must be >= 0")
        for name in ("lr", "finetune_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"schedule.{name} must be positive")


@dataclass(frozen=True)
class CheckpointRefs:
    pretrained: str = ""
    trained: str = ""
    early: str = ""


@dataclass(frozen=True)
class SweepConfig:
    alphas: tuple = ()
    mask_lrs: tuple = ()

    def __post_init__(self):
        if not self.alphas or not self.mask_lrs:
            raise ConfigError("sweep.alphas and sweep.mask_lrs must be non-empty")


@dataclass(frozen=True)
class RunConfig:
    model: str = "lenet300"
    method: str = "dense"
    seed: int = 0
    batch_size: int = 128
    mask_batch_size: int = 0  # 0 means: use batch_size
    out_dir: str = "runs/run"
    snapshot_epochs: tuple = (1,)
    eval_every: int = 1
    preset: str = "desk-v1"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    prune: PruneConfig = field(default_factory=lambda: PruneConfig(ratio=0.9))
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    checkpoints: CheckpointRefs = field(default_factory=CheckpointRefs)
    sweep: SweepConfig | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.mask_batch_size < 0:
            raise ConfigError("mask_batch_size must be nonnegative")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        known = ("lenet300", "lenet5-caffe")
        if self.model not in known and not self.model.startswith("mlp:"):
            raise ConfigError(f"model must be one of {known} or 'mlp:<dims>', got {self.model!r}")

    @property
    def effective_mask_batch(self) -> int:
        return self.mask_batch_size or self.batch_size

    @property
    def run_id(self) -> str:
        return f"{self.method}-{self.model}-s{self.seed}"


# Named, versioned schedule presets. "desk" finishes in minutes on a
# laptop CPU; "full" is the full-length schedule.
PRESETS: dict[str, dict] = {
    "desk-v1": {
        "schedule": {
            "train_epochs": 20,
            "lr": 0.05,
            "milestones": [10, 15],
            "finetune_epochs": 20,
            "finetune_milestones": [12],
            "pretrain_epochs": 10,
            "warmup_epochs": 1,
            "rewind_epoch": 1,
        }
    },
    "full-v1": {
        "schedule": {
            "train_epochs": 160,
            "lr": 0.1,
            "milestones": [80, 120],
            "finetune_epochs": 50,
            "finetune_milestones": [30],
            "pretrain_epochs": 10,
            "warmup_epochs": 1,
            "rewind_epoch": 1,
        }
    },
}
_PRESET_ALIASES = {"desk": "desk-v1", "full": "full-v1"}


def _take(raw: dict, key: str, default, path: str):
    value = raw.pop(key, default)
    if isinstance(default, tuple) and isinstance(value, list):
        value = tuple(value)
    return value


def _reject_unknown(raw: dict, path: str) -> None:
    if raw:
        key = next(iter(raw))
        where = f"{path}.{key}" if path else key
        raise ConfigError(f"unknown config key {where!r}")


def _parse_section(cls, raw: dict | None, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must be an object")
    raw = dict(raw)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in raw:
            default = f.default if f.default is not dataclasses.MISSING else ()
            kwargs[f.name] = _take(raw, f.name, default, path)
    _reject_unknown(raw, path)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_config(raw: dict, preset: str | None = None, **overrides) -> RunConfig:
    """Build a validated RunConfig from a raw dict.

    Precedence: dataclass defaults < preset < file contents < overrides
    (CLI flags). Unknown keys anywhere are an error.
    """
    if not isinstance(raw, dict):
        raise ConfigError("top-level config must be an object")
    preset_name = preset or raw.get("preset") or "desk-v1"
    preset_name = _PRESET_ALIASES.get(preset_name, preset_name)
    if preset_name not in PRESETS:
        raise ConfigError(f"unknown preset {preset_name!r}; have {sorted(PRESETS)}")
    merged = _deep_merge(PRESETS[preset_name], raw)
    merged["preset"] = preset_name
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value

    merged = dict(merged)
    kwargs = {}
    kwargs["dataset"] = _parse_section(DatasetConfig, merged.pop("dataset", None), "dataset")
    kwargs["schedule"] = _parse_section(ScheduleConfig, merged.pop("schedule", None), "schedule")
    kwargs["checkpoints"] = _parse_section(
        CheckpointRefs, merged.pop("checkpoints", None), "checkpoints"
    )
    prune_raw = merged.pop("prune", None)
    if prune_raw is None:
        kwargs["prune"] = PruneConfig(ratio=0.9)
    else:
        kwargs["prune"] = _parse_section(PruneConfig, prune_raw, "prune")
    sweep_raw = merged.pop("sweep", None)
    kwargs["sweep"] = _parse_section(SweepConfig, sweep_raw, "sweep") if sweep_raw else None

    for f in dataclasses.fields(RunConfig):
        if f.name in ("dataset", "schedule", "checkpoints", "prune", "sweep"):
            continue
        if f.name in merged:
            default = f.default if f.default is not dataclasses.MISSING else ()
            kwargs[f.name] = _take(merged, f.name, default, "")
    _reject_unknown(merged, "")
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path, preset: str | None = None, **overrides) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(raw, preset=preset, **overrides)


def config_to_dict(cfg: RunConfig) -> dict:
    out = dataclasses.asdict(cfg)

    def tuples_to_lists(obj):
        if isinstance(obj, dict):
            return {k: tuples_to_lists(v) for k, v in obj.items()}
        if isinstance(obj, tuple):
            return [tuples_to_lists(v) for v in obj]
        return obj

    return tuples_to_lists(out)


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Persist the fully resolved config for the reproducibility audit."""
    from . import __version__

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"package_version": __version__, **config_to_dict(cfg)}
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
