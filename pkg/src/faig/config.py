"""Experiment configuration: INI-style ``key = value`` file with section headers."""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .model import ModelSpec
from .train import TrainConfig

SWEEP_FRACTIONS = (0.001, 0.003, 0.01, 0.03, 0.05, 0.1, 0.3, 0.5, 1.0)


@dataclass(frozen=True)
class PathsConfig:
    output_dir: str = "runs/desk"
    train_manifest: str = ""      # empty: procedural images
    eval_manifest: str = ""


@dataclass(frozen=True)
class DataConfig:
    seed: int = 1234
    train_images: int = 300
    train_size: int = 128
    val_images: int = 8
    val_size: int = 64
    attr_images: int = 32
    attr_size: int = 64
    eval_images: int = 20
    eval_size: int = 96
    calib_images: int = 100
    holdout_images: int = 100
    predict_size: int = 64


@dataclass(frozen=True)
class RetrainConfig:
    iterations: int = 3000
    batch_size: int = 16
    patch_size: int = 64
    lr: float = 2e-4
    min_lr: float = 1e-6
    eval_every: int = 1000
    methods: tuple[str, ...] = ("faig", "ig", "absdelta", "random")
    tasks: tuple[str, ...] = ("deblur", "denoise")
    fraction: float = 0.01
    upper_bound: bool = True

    def train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size,
                           patch_size=self.patch_size, lr=self.lr, min_lr=self.min_lr,
                           eval_every=self.eval_every, policy="blur")


@dataclass(frozen=True)
class AttributionConfig:
    steps: int = 100
    fraction: float = 0.01
    chunk: int = 16
    degradation_seed: int = 7


@dataclass(frozen=True)
class EvalConfig:
    mask_fractions: tuple[float, ...] = (0.01, 0.05)
    mask_methods: tuple[str, ...] = ("faig", "ig", "absdelta", "random", "faig_nosub")
    sweep_fractions: tuple[float, ...] = SWEEP_FRACTIONS
    sweep_methods: tuple[str, ...] = ("faig", "random")
    degradation_seed: int = 11
    calibrate: bool = True
    t_blur: float = 0.5
    t_noise: float = 0.6
    predict_fraction: float = 0.01
    # when non-empty, calibration also picks the per-image and per-degradation set sizes
    predict_fraction_grid: tuple[float, ...] = (0.01, 0.02, 0.05, 0.1)
    predict_steps: int = 100
    pseudo_gt: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSpec = field(default_factory=lambda: ModelSpec(channels=16, num_blocks=4))
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=20000, batch_size=16, patch_size=64, lr=2e-4, policy="bicubic"))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(
        iterations=10000, batch_size=16, patch_size=64, lr=1e-3, policy="blind"))
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("at least one seed is required")

    @property
    def output_dir(self) -> Path:
        return Path(os.environ.get("FAIG_OUTPUT_DIR") or self.paths.output_dir)

    def validate_paths(self) -> None:
        for p in (self.paths.train_manifest, self.paths.eval_manifest):
            if p and not Path(p).exists():
                raise FileNotFoundError(f"configured manifest {p} does not exist")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, value in _sections(self).items():
            parser[section] = {k: _format(v) for k, v in dataclasses.asdict(value).items()}
        parser["experiment"] = {"seeds": _format(self.seeds)}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)

    # Stage digests chain upstream settings, so changing an evaluation option
    # does not invalidate trained checkpoints.
    _STAGES = {
        "data": ("data", "paths.train_manifest", "paths.eval_manifest"),
        "baseline": ("data", "paths.train_manifest", "paths.eval_manifest", "model", "baseline"),
        "target": ("data", "paths.train_manifest", "paths.eval_manifest", "model", "baseline", "finetune"),
        "attribution": ("data", "paths.train_manifest", "paths.eval_manifest", "model", "baseline",
                        "finetune", "attribution"),
        "report": ("data", "paths.train_manifest", "paths.eval_manifest", "model", "baseline",
                   "finetune", "attribution", "retrain", "eval"),
    }

    def digest(self, stage: str = "report") -> str:
        sections = _sections(self)
        h = hashlib.sha256()
        for key in self._STAGES[stage]:
            if "." in key:
                sec, name = key.split(".")
                h.update(f"{key}={getattr(sections[sec], name)!r};".encode())
            else:
                h.update(f"[{key}]{sorted(dataclasses.asdict(sections[key]).items())!r};".encode())
        return h.hexdigest()[:16]


def _sections(cfg: ExperimentConfig) -> dict:
    return dict(paths=cfg.paths, data=cfg.data, model=cfg.model, baseline=cfg.baseline,
                finetune=cfg.finetune, retrain=cfg.retrain, attribution=cfg.attribution, eval=cfg.eval)


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _coerce(raw: str, typ, current):
    raw = raw.strip()
    if isinstance(current, bool) or typ in (bool, "bool"):
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes", "on")
    if isinstance(current, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        inner = type(current[0]) if current else str
        return tuple(inner(x) for x in items)
    if isinstance(current, int):
        value = float(raw)   # accepts 2e4
        if not value.is_integer():
            raise ValueError(f"not an integer: {raw!r}")
        return int(value)
    if isinstance(current, float):
        return float(raw)
    return raw


def _update(obj, values: dict[str, str], section: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        changes[key] = _coerce(raw, known[key].type, getattr(obj, key))
    return dataclasses.replace(obj, **changes)


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read a config file (optional) and apply ``section.key=value`` overrides on top."""
    parser = configparser.ConfigParser()
    if path is not None:
        if not Path(path).exists():
            raise FileNotFoundError(f"config file {path} not found")
        parser.read(path)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, name = key.strip().split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][name] = value
    cfg = ExperimentConfig()
    sections = _sections(cfg)
    changes = {}
    for section in parser.sections():
        if section == "experiment":
            for key, raw in parser[section].items():
                if key != "seeds":
                    raise ValueError(f"unknown key {key!r} in section [experiment]")
                changes["seeds"] = tuple(int(x) for x in raw.split(",") if x.strip())
            continue
        if section not in sections:
            raise ValueError(f"unknown config section [{section}]")
        changes[section] = _update(sections[section], dict(parser[section]), section)
    return dataclasses.replace(cfg, **changes)
