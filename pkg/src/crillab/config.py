"""Experiment configuration files: strict YAML with field-level diagnostics."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from . import taskforge
from .errors import ConfigError, CrilError
from .loop import TrainConfig
from .replay import StrategyKind

OUTPUT_ROOT_ENV = "CRILLAB_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


@dataclass
class SuiteConfig:
    n_tasks: int = 4
    seed: int = 0
    grid_size: int = 8
    image_size: int = 32
    max_steps: int = 40
    dims: int = 2
    depth: int = 3
    goal_extent: int = 1
    min_palette_distance: int = 40

    def build(self) -> list:
        kw = asdict(self)
        return taskforge.make_suite(kw.pop("n_tasks"), kw.pop("seed"), **kw)


@dataclass
class ExperimentConfig:
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    strategies: list = field(default_factory=lambda: [k.value for k in StrategyKind])
    seeds: list = field(default_factory=lambda: [0])
    output_root: str = None

    def resolved_output_root(self) -> Path:
        return Path(self.output_root or os.environ.get(OUTPUT_ROOT_ENV) or DEFAULT_OUTPUT_ROOT)

    def train_config(self, method: str = None, seed: int = None) -> TrainConfig:
        d = self.train.to_dict()
        if method is not None:
            d["strategy"] = method
        if seed is not None:
            d["seed"] = seed
        return TrainConfig(**d)

    def to_dict(self) -> dict:
        return {"suite": asdict(self.suite), "train": self.train.to_dict(),
                "strategies": list(self.strategies), "seeds": list(self.seeds),
                "output_root": self.output_root}


TOP_LEVEL = ("suite", "train", "strategies", "seeds", "output_root")


def _key_lines(text: str) -> dict:
    """``{"suite.n_tasks": line}`` for every mapping key, 1-based."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}{k.value}"
                lines[path] = k.start_mark.line + 1
                walk(v, path + ".")

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, "")
    return lines


def _field_types(cls) -> dict:
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


def _coerce(path: str, value, want: type, line):
    """Accept ints for floats; reject everything else that does not match the default's type."""
    if want is type(None) or value is None:
        return value
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is tuple and isinstance(value, list):
        return tuple(value)
    if want is int and isinstance(value, bool):
        raise ConfigError(_where(f"expected an integer, got {value!r}", line), path)
    if not isinstance(value, want):
        raise ConfigError(_where(f"expected {want.__name__}, got {type(value).__name__} {value!r}", line), path)
    return value


def _where(msg: str, line) -> str:
    return f"{msg} (line {line})" if line else msg


def _section(cls, data, name: str, lines: dict):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(_where("expected a mapping", lines.get(name)), name)
    types = _field_types(cls)
    kwargs = {}
    for key, value in data.items():
        path = f"{name}.{key}"
        if key not in types:
            raise ConfigError(_where(f"unknown key; valid keys: {', '.join(sorted(types))}",
                                     lines.get(path)), path)
        kwargs[key] = _coerce(path, value, types[key], lines.get(path))
    try:
        return cls(**kwargs)
    except CrilError as exc:
        raise ConfigError(_where(str(exc), _blame(exc, name, kwargs, lines)), _field_of(exc, name, kwargs)) from None


def _field_of(exc, name, kwargs) -> str:
    text = str(exc)
    for key in sorted(kwargs, key=len, reverse=True):
        if key in text:
            return f"{name}.{key}"
    return name


def _blame(exc, name, kwargs, lines):
    return lines.get(_field_of(exc, name, kwargs))


def _check_suite(s: SuiteConfig, lines: dict) -> None:
    rules = {
        "n_tasks": s.n_tasks >= 1,
        "grid_size": s.grid_size >= 6,
        "image_size": s.image_size > 0 and s.image_size % 8 == 0 and s.image_size % max(s.grid_size, 1) == 0,
        "max_steps": s.max_steps >= 1,
        "dims": s.dims in (2, 3),
        "depth": s.depth >= 2,
    }
    hints = {
        "n_tasks": "must be >= 1",
        "grid_size": "must be >= 6",
        "image_size": "must be divisible by 8 and by grid_size",
        "max_steps": "must be >= 1",
        "dims": "must be 2 or 3",
        "depth": "must be >= 2",
    }
    for key, ok in rules.items():
        if not ok:
            path = f"suite.{key}"
            raise ConfigError(_where(f"{hints[key]}, got {getattr(s, key)!r}", lines.get(path)), path)


def parse_config(text: str) -> ExperimentConfig:
    """Validate a YAML document; every problem raises ``ConfigError`` naming the field."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(_where(f"invalid YAML: {getattr(exc, 'problem', exc)}", line), "<document>") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", "<document>")
    lines = _key_lines(text)
    for key in data:
        if key not in TOP_LEVEL:
            raise ConfigError(_where(f"unknown key; valid keys: {', '.join(TOP_LEVEL)}", lines.get(str(key))),
                              str(key))
    suite = _section(SuiteConfig, data.get("suite"), "suite", lines)
    _check_suite(suite, lines)
    train = _section(TrainConfig, data.get("train"), "train", lines)

    strategies = data.get("strategies", [k.value for k in StrategyKind])
    if not isinstance(strategies, list) or not strategies:
        raise ConfigError(_where("expected a non-empty list", lines.get("strategies")), "strategies")
    for s in strategies:
        try:
            StrategyKind.parse(s)
        except CrilError as exc:
            raise ConfigError(_where(str(exc), lines.get("strategies")), "strategies") from None

    seeds = data.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(x, int) and not isinstance(x, bool)
                                                          for x in seeds):
        raise ConfigError(_where("expected a non-empty list of integers", lines.get("seeds")), "seeds")

    root = data.get("output_root")
    if root is not None and not isinstance(root, str):
        raise ConfigError(_where("expected a path string", lines.get("output_root")), "output_root")
    return ExperimentConfig(suite, train, list(strategies), list(seeds), root)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found", "<file>")
    return parse_config(path.read_text())


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
