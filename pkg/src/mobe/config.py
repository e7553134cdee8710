"""Experiment configuration: TOML file with [data] [model] [train] [eval] [ablate]."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import ModelConfig
from .optim import LRSchedule
from .synthgen import SynthConfig

TASKS = ("classification", "retrieval", "reconstruction")

# full-scale reference schedules per task
TASK_DEFAULTS = {
    "classification": dict(alpha=0.1, lr=1e-4, schedule=("linear", 0.01, 0.0), batch_size=1024,
                           phase1_epochs=1000, meta_steps=10, support_epochs=20, query_epochs=5),
    "retrieval": dict(alpha=0.05, lr=3e-4, schedule=("constant", 1.0, 0.0), batch_size=300,
                      phase1_epochs=300, meta_steps=10, support_epochs=20, query_epochs=5),
    "reconstruction": dict(alpha=0.05, lr=1e-4, schedule=("cosine", 0.1, 0.05), batch_size=32,
                           phase1_epochs=240, meta_steps=20, support_epochs=10, query_epochs=5),
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    task: str = "classification"
    alpha: float | None = None
    lr: float | None = None
    lr_schedule: str | None = None
    lr_final_ratio: float | None = None
    warmup_frac: float | None = None
    router_lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int | None = None
    phase1_epochs: int | None = None
    router_epochs: int = 10
    meta_steps: int | None = None
    support_epochs: int | None = None
    query_epochs: int | None = None
    temperature: float = 1.0
    seed: int = 0
    mobe_enabled: bool = True
    sra_enabled: bool = True
    # without MoBE, extend phase 1 by the query epochs the meta steps would have run
    match_epochs: bool = True
    few_shot_subject: int | None = None
    few_shot_ratio: float = 1.0
    single_subject: int | None = None
    misalign: bool = False
    keep_length: int | None = None

    def resolved(self) -> "TrainConfig":
        """Copy with every per-task ``None`` replaced by its task default."""
        if self.task not in TASKS:
            raise ConfigError(f"train.task must be one of {TASKS}, got {self.task!r}")
        d = TASK_DEFAULTS[self.task]
        kind, final, warm = d["schedule"]
        out = dataclasses.replace(
            self,
            alpha=d["alpha"] if self.alpha is None else self.alpha,
            lr=d["lr"] if self.lr is None else self.lr,
            lr_schedule=kind if self.lr_schedule is None else self.lr_schedule,
            lr_final_ratio=final if self.lr_final_ratio is None else self.lr_final_ratio,
            warmup_frac=warm if self.warmup_frac is None else self.warmup_frac,
            batch_size=d["batch_size"] if self.batch_size is None else self.batch_size,
            phase1_epochs=d["phase1_epochs"] if self.phase1_epochs is None else self.phase1_epochs,
            meta_steps=d["meta_steps"] if self.meta_steps is None else self.meta_steps,
            support_epochs=d["support_epochs"] if self.support_epochs is None else self.support_epochs,
            query_epochs=d["query_epochs"] if self.query_epochs is None else self.query_epochs,
        )
        out.validate()
        return out

    def validate(self) -> None:
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError("train.alpha must be non-negative")
        for name in ("phase1_epochs", "router_epochs", "meta_steps", "support_epochs", "query_epochs"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if self.sra_enabled and self.batch_size is not None and self.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2 when SRA is enabled")
        if self.temperature <= 0:
            raise ConfigError("train.temperature must be positive")

    def schedule(self) -> LRSchedule:
        r = self.resolved()
        return LRSchedule(r.lr_schedule, r.lr, r.lr_final_ratio, r.warmup_frac)

    @property
    def label(self) -> str:
        if self.single_subject is not None:
            return "vanilla-single"
        return {(True, True): "full", (True, False): "mobe-only",
                (False, True): "sra-only", (False, False): "vanilla-multi"}[(self.mobe_enabled, self.sra_enabled)]


@dataclass
class EvalConfig:
    pool_size: int | None = None
    repeats: int = 30


@dataclass
class AblateConfig:
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    ranks: list = field(default_factory=lambda: [2, 4, 8, 16, 32])
    grid: str = "toggles"


@dataclass
class ExperimentConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    @property
    def seed(self) -> int:
        return self.train.seed

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything except the seed (reported alongside it)."""
        d = self.to_dict()
        d["train"] = {k: v for k, v in d["train"].items() if k != "seed"}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """``cfg.replace(train={"seed": 3})`` returns a copy with fields overridden."""
        out = {}
        for f in dataclasses.fields(self):
            cur = getattr(self, f.name)
            upd = sections.get(f.name)
            out[f.name] = dataclasses.replace(cur, **upd) if upd else dataclasses.replace(cur)
        return ExperimentConfig(**out)


def from_dict(raw: dict[str, Any]) -> ExperimentConfig:
    kinds = {"data": SynthConfig, "model": ModelConfig, "train": TrainConfig,
             "eval": EvalConfig, "ablate": AblateConfig}
    parts = {}
    for section, values in raw.items():
        if section not in kinds:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        known = {f.name for f in dataclasses.fields(kinds[section])}
        for key in values:
            if key not in known:
                raise ConfigError(f"unknown config key {section}.{key}")
        parts[section] = kinds[section](**values)
    cfg = ExperimentConfig(**parts)
    cfg.train.validate()
    return cfg


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or "." not in key:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        section, name = key.split(".", 1)
        raw.setdefault(section, {})[name] = _parse_value(value)
    env_seed = os.environ.get("MOBE_SEED")
    if env_seed is not None:
        raw.setdefault("train", {})["seed"] = int(env_seed)
    return from_dict(raw)


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def to_toml(cfg: ExperimentConfig) -> str:
    lines = []
    for section, values in cfg.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if v is None:
                continue
            lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    return "\n".join(lines)
