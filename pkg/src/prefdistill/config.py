"""Run configuration: one JSON document, validated strictly before any side effect."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .optim import AdamWConfig
from .sampler import SamplerConfig
from .teacher import DEFAULT_PROMPT


@dataclass
class PathsConfig:
    catalog: str = "catalog.pde"
    personas_train: str = "personas_train.jsonl"
    personas_val: str = "personas_val.jsonl"
    personas_test: str = "personas_test.jsonl"
    labels_val: str = "labels_val.jsonl"
    labels_test: str = "labels_test.jsonl"
    output_dir: str = "run"
    image_refs: str | None = None  # JSON object: image id -> path/URL, for HTTP teachers


@dataclass
class StudentConfig:
    init: str = "import"  # or "random-unit"
    dim: int = 512

    def __post_init__(self):
        if self.init not in ("import", "random-unit"):
            raise ValueError(f"student.init must be 'import' or 'random-unit', got {self.init!r}")
        if self.dim < 2:
            raise ValueError("student.dim must be >= 2")


@dataclass
class SyntheticTeacherConfig:
    persona_hidden: str = "hidden_personas.pde"
    image_hidden: str = "hidden_images.pde"
    tau: float = 0.0
    seed: int = 0


@dataclass
class HTTPTeacherConfig:
    url: str = ""
    model: str = ""
    auth_env: str | None = None
    max_parallel: int = 8
    max_retries: int = 3
    timeout_ms: int = 30000
    prompt_template: str = DEFAULT_PROMPT
    backoff_s: float = 0.5


@dataclass
class TeacherConfig:
    kind: str = "synthetic"  # synthetic | replay | http
    cache: str | None = "teacher_cache.jsonl"  # relative to output_dir
    synthetic: SyntheticTeacherConfig = field(default_factory=SyntheticTeacherConfig)
    http: HTTPTeacherConfig = field(default_factory=HTTPTeacherConfig)

    def __post_init__(self):
        if self.kind not in ("synthetic", "replay", "http"):
            raise ValueError(f"teacher.kind must be synthetic, replay or http; got {self.kind!r}")
        if self.kind == "replay" and not self.cache:
            raise ValueError("a replay teacher needs teacher.cache")


@dataclass
class LabelConfig:
    splits: tuple = ("val", "test")
    catalog_size: int | None = None  # entrants per tournament; None = whole catalog
    shuffle: bool = False
    parallelism: int = 8

    def __post_init__(self):
        self.splits = tuple(self.splits)
        bad = set(self.splits) - {"train", "val", "test"}
        if bad:
            raise ValueError(f"unknown label splits {sorted(bad)}")


@dataclass
class EvalConfig:
    split: str = "test"
    checkpoint: str = "best"  # best | last | explicit directory
    figures: bool = True


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    max_steps: int = 100
    eval_cadence: int = 1
    patience: int = 5
    figures: bool = True
    seed: int = 0
    base_dir: str = field(default=".", metadata={"internal": True})

    def __post_init__(self):
        if self.max_steps < 0 or self.eval_cadence < 1 or self.patience < 1:
            raise ValueError("max_steps >= 0, eval_cadence >= 1 and patience >= 1 required")

    def micro_batch_mismatch(self) -> bool:
        opt = self.optimizer
        return opt.micro_batch * opt.accumulation_steps != self.sampler.groups_per_step

    def resolve(self, p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def output_dir(self) -> Path:
        return self.resolve(self.paths.output_dir)

    def path(self, name: str) -> Path | None:
        return self.resolve(getattr(self.paths, name))

    def cache_path(self) -> Path | None:
        if not self.teacher.cache:
            return None
        p = Path(self.teacher.cache)
        return p if p.is_absolute() else self.output_dir / p

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if not f.metadata.get("internal")}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        sub = hints[key]
        if dataclasses.is_dataclass(sub):
            kwargs[key] = _build(sub, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict, base_dir=".") -> RunConfig:
    cfg = _build(RunConfig, data, "config")
    cfg.base_dir = str(base_dir)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data, base_dir=path.parent)


def defaults_help() -> str:
    return json.dumps(RunConfig().to_dict(), indent=2)
