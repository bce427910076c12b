"""Pipeline configuration: one JSON document describing a whole benchmark.

Only two environment variables are honoured, and only as overrides:
``MESHUDA_OUTPUT_ROOT`` (output root) and ``MESHUDA_WORKERS`` (worker count).
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .datagen.corpus import DIFFICULTIES, TaskSpec, check_boundaries, get_task
from .exceptions import ConfigError
from .harness.sweep import DESK_GRID, PAPER_GRID
from .harness.training import TrainConfig
from .selection import STRATEGIES
from .uda import KINDS

CONFIG_VERSION = 1
ENV_OUTPUT_ROOT = "MESHUDA_OUTPUT_ROOT"
ENV_WORKERS = "MESHUDA_WORKERS"


@dataclass
class PipelineConfig:
    task: str = "plate-heat"
    resolution: int | None = None
    n_samples: int = 600
    seed: int = 0
    boundaries: dict | None = None
    dataset: str = "data/plate-heat"
    difficulties: list = field(default_factory=lambda: ["medium"])
    sweep_difficulties: list | None = None
    train: dict = field(default_factory=dict)
    kinds: list = field(default_factory=lambda: ["coral", "cmd", "dann"])
    lambda_grid: list | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3])
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    output_root: str = "out"
    version: int = CONFIG_VERSION
    source_text: str | None = field(default=None, repr=False, compare=False)

    # -- derived views -------------------------------------------------------
    def task_spec(self) -> TaskSpec:
        task = get_task(self.task)
        if self.resolution is not None:
            task = task.with_resolution(self.resolution)
        return task

    def split_boundaries(self) -> dict:
        return dict(self.boundaries or self.task_spec().boundaries)

    def train_config(self) -> TrainConfig:
        profile = self.train.get("profile", "desk")
        try:
            return TrainConfig.preset(profile, **{k: v for k, v in self.train.items() if k != "profile"})
        except TypeError as exc:
            raise self._error(f"unknown train option ({exc})", "train") from None

    def grid(self) -> list:
        if self.lambda_grid is not None:
            return [float(v) for v in self.lambda_grid]
        return list(PAPER_GRID) + [0.0] if self.train.get("profile") == "paper" else list(DESK_GRID)

    def swept(self) -> list:
        return list(self.difficulties if self.sweep_difficulties is None else self.sweep_difficulties)

    # -- validation ------------------------------------------------------------
    def _error(self, message: str, key: str) -> ConfigError:
        line = locate_key(self.source_text, key) if self.source_text else None
        where = f" (field '{key}'" + (f", line {line})" if line else ")")
        return ConfigError(message + where)

    def validate(self) -> "PipelineConfig":
        if self.version != CONFIG_VERSION:
            raise self._error(f"unsupported config version {self.version}", "version")
        try:
            task = self.task_spec()
        except ConfigError as exc:
            raise self._error(str(exc), "task") from None
        if self.resolution is not None and self.resolution < (8 if task.name == "plate-heat" else 2):
            raise self._error(f"resolution {self.resolution} is too small", "resolution")
        if self.n_samples < 1:
            raise self._error("n_samples must be >= 1", "n_samples")
        try:
            check_boundaries(task, self.split_boundaries())
        except ConfigError as exc:
            raise self._error(str(exc), "boundaries") from None
        for d in self.difficulties:
            if d not in DIFFICULTIES:
                raise self._error(f"unknown difficulty {d!r}", "difficulties")
        for d in self.swept():
            if d not in self.difficulties:
                raise self._error(f"sweep difficulty {d!r} is not in difficulties", "sweep_difficulties")
        for k in self.kinds:
            if k not in KINDS or k == "none":
                raise self._error(f"unknown uda kind {k!r}", "kinds")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise self._error(f"unknown strategy {s!r}", "strategies")
        if not self.seeds:
            raise self._error("at least one seed is required", "seeds")
        if any(v < 0 for v in self.grid()) or not self.grid():
            raise self._error("lambda grid must be nonempty and nonnegative", "lambda_grid")
        try:
            self.train_config()
        except ConfigError as exc:
            raise self._error(str(exc), "train") from None
        return self

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "source_text"}
        return d


def locate_key(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def parse_config(text: str) -> PipelineConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object (line 1)")
    known = set(PipelineConfig.__dataclass_fields__) - {"source_text"}
    unknown = sorted(set(raw) - known)
    if unknown:
        line = locate_key(text, unknown[0])
        raise ConfigError(f"unknown config field '{unknown[0]}'" + (f" (line {line})" if line else ""))
    cfg = PipelineConfig(**raw)
    cfg.source_text = text
    return cfg.validate()


def load_config(path) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def output_root(config: PipelineConfig | None, override: str | None = None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get(ENV_OUTPUT_ROOT)
    if env:
        return Path(env)
    return Path(config.output_root if config is not None else "out")


def worker_count(flag: int | None) -> int:
    """Explicit flag first, then ``MESHUDA_WORKERS``, then the CPU count."""
    if flag is not None:
        if flag < 1:
            raise ConfigError("--workers must be >= 1")
        return flag
    env = os.environ.get(ENV_WORKERS)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise ConfigError(f"{ENV_WORKERS} must be an integer, got {env!r}") from None
        if value < 1:
            raise ConfigError(f"{ENV_WORKERS} must be >= 1")
        return value
    return max(1, os.cpu_count() or 1)
