"""Run configuration: YAML loading, defaults, validation and seed fan-out."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .seeding import derive_seed


@dataclass
class DataSection:
    num_classes: int = 3
    image_size: int = 32
    samples_per_class: int = 1000
    conflict_ratio: float = 0.01
    bias_kind: str = "color"
    test_samples_per_class: int = 300
    path: str | None = None
    test_path: str | None = None
    seed: int | None = None


@dataclass
class ClassifierSection:
    architecture: str = "mlp3"
    q: float = 0.7
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 64
    hidden: int = 100
    augment: bool = False
    seed: int | None = None


@dataclass
class DiffusionSection:
    T: int = 100
    beta_start: float | None = None
    beta_end: float | None = None
    gamma_p2: float = 1.0
    k: float = 1.0
    base_width: int = 32
    levels: int = 3
    steps: int = 3000
    batch_size: int = 32
    learning_rate: float = 5e-4
    ema_decay: float = 0.0
    train_source: str = "pretrain"
    pretrain_per_class: int = 700
    seed: int | None = None


@dataclass
class InjectionSection:
    gamma_inject: float = 0.9
    t_edit: int | None = None
    t_boost: int | None = None
    mask: str = "auto"
    eta_boost: float = 1.0
    num_steps: int | None = None
    # recalibrated for the patch-statistics distance (0.33 is an LPIPS value)
    calibration_threshold: float = 0.07
    calibration_images: int = 16
    workers: int = 1
    batch_size: int = 64
    seed: int | None = None


@dataclass
class PipelineSection:
    K: int = 10
    bias_conflict_ratio_syn: float = 0.1
    same_class_pairing: bool = True
    store: str | None = None


@dataclass
class ReportSection:
    grid_rows: int = 8
    margin: int = 2


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataSection = field(default_factory=DataSection)
    # short GCE training: longer runs start memorising the few conflict samples
    bias_classifier: ClassifierSection = field(default_factory=lambda: ClassifierSection(epochs=10))
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    injection: InjectionSection = field(default_factory=InjectionSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    report: ReportSection = field(default_factory=ReportSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def section_seed(self, name: str) -> int:
        """Seed of a section: its explicit ``seed`` or one derived from the global seed."""
        explicit = getattr(getattr(self, name), "seed", None)
        if explicit is not None:
            return int(explicit)
        return derive_seed(self.seed, name) % 2**31

    def validate(self) -> "RunConfig":
        _check(self)
        return self


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _coerce(cls, data, where: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where + '.' if where else ''}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        key = f"{where}.{name}" if where else name
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _coerce(type(default), value, key)
        else:
            kwargs[name] = _coerce_scalar(value, f.type, key)
    return cls(**kwargs)


def _coerce_scalar(value, type_str: str, key: str):
    optional = "None" in str(type_str)
    if value is None:
        if optional:
            return None
        raise ConfigError(f"{key}: must not be null")
    base = str(type_str).split("|")[0].strip()
    try:
        if base == "bool":
            if not isinstance(value, bool):
                raise TypeError
            return value
        if base == "int":
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise TypeError
            return int(value)
        if base == "float":
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if base == "str":
            if not isinstance(value, str):
                raise TypeError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {base}, got {value!r}") from None
    return value


def _require(ok: bool, key: str, constraint: str, value) -> None:
    if not ok:
        raise ConfigError(f"{key}: must satisfy {constraint}, got {value!r}")


def _check(cfg: RunConfig) -> None:
    d = cfg.data
    _require(2 <= d.num_classes <= 10, "data.num_classes", "2 <= num_classes <= 10", d.num_classes)
    _require(0.0 <= d.conflict_ratio <= 1.0, "data.conflict_ratio", "0 <= conflict_ratio <= 1", d.conflict_ratio)
    _require(d.bias_kind in ("color", "texture"), "data.bias_kind", "one of color, texture", d.bias_kind)
    _require(d.samples_per_class >= 1, "data.samples_per_class", ">= 1", d.samples_per_class)
    _require(d.image_size >= 8 and d.image_size % 4 == 0, "data.image_size", ">= 8 and divisible by 4", d.image_size)
    for name in ("bias_classifier", "classifier"):
        c = getattr(cfg, name)
        _require(c.architecture in ("mlp3", "small_conv"), f"{name}.architecture", "one of mlp3, small_conv", c.architecture)
        _require(0.0 < c.q <= 1.0, f"{name}.q", "0 < q <= 1", c.q)
        _require(c.learning_rate > 0, f"{name}.learning_rate", "> 0", c.learning_rate)
        _require(c.epochs >= 0, f"{name}.epochs", ">= 0", c.epochs)
        _require(c.batch_size >= 1, f"{name}.batch_size", ">= 1", c.batch_size)
    f = cfg.diffusion
    _require(f.T >= 2, "diffusion.T", ">= 2", f.T)
    _require(f.gamma_p2 >= 0, "diffusion.gamma_p2", ">= 0", f.gamma_p2)
    _require(f.k > 0, "diffusion.k", "> 0", f.k)
    _require(f.levels >= 1 and d.image_size % 2 ** f.levels == 0, "diffusion.levels",
             "levels >= 1 and image_size divisible by 2**levels", f.levels)
    _require(f.steps >= 0, "diffusion.steps", ">= 0", f.steps)
    _require(0.0 <= f.ema_decay < 1.0, "diffusion.ema_decay", "0 <= ema_decay < 1", f.ema_decay)
    _require(f.train_source in ("pretrain", "train"), "diffusion.train_source", "one of pretrain, train", f.train_source)
    if f.beta_start is not None or f.beta_end is not None:
        _require(f.beta_start is not None and f.beta_end is not None, "diffusion.beta_start",
                 "beta_start and beta_end set together", f.beta_start)
        _require(0 < f.beta_start <= f.beta_end < 1, "diffusion.beta_end", "0 < beta_start <= beta_end < 1", f.beta_end)
    i = cfg.injection
    _require(0.0 <= i.gamma_inject <= 1.0, "injection.gamma_inject", "0 <= gamma_inject <= 1", i.gamma_inject)
    _require(0.0 <= i.eta_boost <= 1.0, "injection.eta_boost", "0 <= eta_boost <= 1", i.eta_boost)
    if i.t_edit is not None:
        _require(0 <= i.t_edit <= f.T, "injection.t_edit", f"0 <= t_edit <= T ({f.T})", i.t_edit)
    if i.t_boost is not None:
        _require(0 <= i.t_boost <= f.T, "injection.t_boost", f"0 <= t_boost <= T ({f.T})", i.t_boost)
    if i.t_edit is not None and i.t_boost is not None:
        _require(i.t_edit >= i.t_boost, "injection.t_boost", f"t_boost <= t_edit ({i.t_edit})", i.t_boost)
    if i.num_steps is not None:
        _require(1 <= i.num_steps <= f.T, "injection.num_steps", f"1 <= num_steps <= T ({f.T})", i.num_steps)
    _require(i.workers >= 1, "injection.workers", ">= 1", i.workers)
    _require(i.calibration_images >= 1, "injection.calibration_images", ">= 1", i.calibration_images)
    p = cfg.pipeline
    _require(p.K >= 1, "pipeline.K", ">= 1", p.K)
    _require(0.0 < p.bias_conflict_ratio_syn <= 1.0, "pipeline.bias_conflict_ratio_syn",
             "0 < ratio <= 1", p.bias_conflict_ratio_syn)


def config_from_dict(data: dict | None) -> RunConfig:
    cfg = _coerce(RunConfig, data or {}, "")
    return cfg.validate()


def loads_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" line {mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}:{line}: cannot parse: {getattr(exc, 'problem', exc)}") from None
    return config_from_dict(data)


def load_config(path=None, env: dict | None = None) -> RunConfig:
    """Load, default and validate a YAML config; env vars may override out/workers."""
    text = "" if path is None else Path(path).read_text(encoding="utf-8")
    cfg = loads_config(text, str(path))
    env = os.environ if env is None else env
    if env.get("DIFFINJECT_OUT"):
        cfg.out = env["DIFFINJECT_OUT"]
    if env.get("DIFFINJECT_WORKERS"):
        try:
            cfg.injection.workers = int(env["DIFFINJECT_WORKERS"])
        except ValueError:
            raise ConfigError(f"DIFFINJECT_WORKERS: expected int, got {env['DIFFINJECT_WORKERS']!r}") from None
    return cfg.validate()
