"""Experiment configuration: TOML file plus ``--set section.key=value`` overrides."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

from ..errors import ConfigError
from ..funet import STRATEGIES
from ..mae import MaeConfig
from .checkpoint import paths as checkpoint_paths

TASKS = ("pretrain", "classify", "segment")
SWEEPS = ("", "n_per_class", "stride", "samples", "fusion")


@dataclass
class RunSection:
    task: str = "pretrain"
    seed: int | None = None
    out_dir: str = "run"
    preset: str = "desk"
    workers: int = 1


@dataclass
class DataSection:
    manifest: str = ""
    test_manifest: str = ""
    stride: int = 1
    n_per_class: int = 30
    n_volumes: int = 0
    sweep_kind: str = ""
    sweep: list = field(default_factory=list)
    region_preset: str = ""
    per_slice: bool = False
    per_volume_clamp: bool = False


@dataclass
class OptimSection:
    lr: float = 1e-4
    batch_size: int = 48
    steps: int = 500
    weight_decay: float = 0.01


@dataclass
class AugmentSection:
    enabled: bool = True
    rotation_max_deg: float = 15.0
    flip_prob: float = 0.5
    crop_scale_min: float = 0.8
    crop_scale_max: float = 1.0


@dataclass
class FunetSection:
    architecture: str = "funet"
    base_width: int = 0  # 0: preset default
    fusion_strategy: str = "concat"
    fusion_layers: list = field(default_factory=list)  # empty: preset default
    num_classes: int = 0  # 0: from the region preset or the label maps
    loss_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    optim: OptimSection = field(default_factory=OptimSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    mae: dict = field(default_factory=dict)
    funet: FunetSection = field(default_factory=FunetSection)
    checkpoint: str = ""
    resume: bool = False
    base_dir: str = "."  # directory relative paths resolve against; not serialized

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(os.path.normpath(Path(self.base_dir) / q))

    @property
    def out_dir(self) -> Path:
        return self.path(self.run.out_dir)

    def mae_config(self) -> MaeConfig:
        try:
            if self.run.preset == "full":
                return MaeConfig.full(**self.mae)
            return MaeConfig.desk(**self.mae)
        except TypeError as exc:
            raise ConfigError(f"invalid [mae] override: {exc}") from exc


_SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "optim": OptimSection,
    "augment": AugmentSection,
    "funet": FunetSection,
}


def _coerce(section: str, key: str, value, typ):
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be a boolean, got {value!r}")
        return value
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is str and isinstance(value, str):
        return value
    if typ is list and isinstance(value, list):
        return value
    if typ == (int | None) and (value is None or (isinstance(value, int) and not isinstance(value, bool))):
        return value
    raise ConfigError(f"{section}.{key} has the wrong type: {value!r}")


def _build_section(name: str, raw: dict):
    cls = _SECTIONS[name]
    known = get_type_hints(cls)
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    return cls(**{k: _coerce(name, k, v, known[k]) for k, v in raw.items()})


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value`` -> (["a", "b"], value); values are parsed as TOML when possible."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"empty key in override {text!r}")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-table value")
        node[path[-1]] = value
    return raw


def config_from_dict(raw: dict, base_dir: str | Path = ".") -> ExperimentConfig:
    raw = dict(raw)
    top = {k: raw.pop(k) for k in ("checkpoint", "resume") if k in raw}
    mae = raw.pop("mae", {})
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    if not isinstance(mae, dict):
        raise ConfigError("[mae] must be a table")
    valid_mae = {f.name for f in fields(MaeConfig)}
    bad = sorted(set(mae) - valid_mae)
    if bad:
        raise ConfigError(f"unknown key(s) in [mae]: {', '.join(bad)}")
    sections = {name: _build_section(name, raw.get(name, {})) for name in _SECTIONS}
    cfg = ExperimentConfig(
        **sections,
        mae=dict(mae),
        checkpoint=str(top.get("checkpoint", "")),
        resume=bool(top.get("resume", False)),
        base_dir=str(base_dir),
    )
    validate(cfg)
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None, task: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    raw = apply_overrides(raw, overrides or [])
    if task is not None:
        raw.setdefault("run", {})["task"] = task
    return config_from_dict(raw, base_dir=path.parent)


def validate(cfg: ExperimentConfig) -> None:
    r, d, o = cfg.run, cfg.data, cfg.optim
    if r.seed is None:
        raise ConfigError("run.seed is mandatory")
    if r.task not in TASKS:
        raise ConfigError(f"run.task must be one of {TASKS}, got {r.task!r}")
    if r.preset not in ("desk", "full"):
        raise ConfigError(f"run.preset must be 'desk' or 'full', got {r.preset!r}")
    if r.workers < 1:
        raise ConfigError("run.workers must be >= 1")
    if o.lr <= 0 or o.batch_size < 1 or o.steps < 0 or o.weight_decay < 0:
        raise ConfigError("optim: lr and batch_size must be positive, steps and weight_decay non-negative")
    if d.stride < 1:
        raise ConfigError("data.stride must be >= 1")
    if d.n_per_class < 1:
        raise ConfigError("data.n_per_class must be >= 1")
    if d.sweep_kind not in SWEEPS:
        raise ConfigError(f"data.sweep_kind must be one of {SWEEPS}, got {d.sweep_kind!r}")
    if d.sweep and not d.sweep_kind:
        raise ConfigError("data.sweep needs data.sweep_kind")
    if d.sweep_kind == "fusion" and any(s not in STRATEGIES for s in d.sweep):
        raise ConfigError(f"fusion sweep values must be among {STRATEGIES}")
    if d.sweep_kind in ("n_per_class", "stride", "samples") and any(
        not isinstance(s, int) or isinstance(s, bool) or s < 1 for s in d.sweep
    ):
        raise ConfigError(f"{d.sweep_kind} sweep values must be positive integers")
    if cfg.funet.architecture not in ("funet", "direct"):
        raise ConfigError("funet.architecture must be 'funet' or 'direct'")
    if cfg.funet.fusion_strategy not in STRATEGIES:
        raise ConfigError(f"funet.fusion_strategy must be one of {STRATEGIES}")
    if len(cfg.funet.loss_weights) != 3:
        raise ConfigError("funet.loss_weights needs three values (dice, focal, ce)")
    if any(w < 0 for w in cfg.funet.loss_weights):
        raise ConfigError("funet.loss_weights must be non-negative")
    a = cfg.augment
    if not 0 < a.crop_scale_min <= a.crop_scale_max <= 1:
        raise ConfigError("augment crop scales must satisfy 0 < min <= max <= 1")
    if not d.manifest:
        raise ConfigError("data.manifest is required")
    if r.task in ("classify", "segment") and not d.test_manifest:
        raise ConfigError("data.test_manifest is required for evaluation")
    for label, p in (("data.manifest", d.manifest), ("data.test_manifest", d.test_manifest)):
        if p and not cfg.path(p).is_file():
            raise ConfigError(f"{label} does not exist: {cfg.path(p)}")
    if cfg.checkpoint and not checkpoint_paths(cfg.path(cfg.checkpoint))[0].is_file():
        raise ConfigError(f"checkpoint does not exist: {cfg.path(cfg.checkpoint)}")
    cfg.mae_config()

