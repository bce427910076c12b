"""Task definitions, stratified corpus generation and domain splitting."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..exceptions import ConfigError, InsufficientDataError, SolverError
from .solvers import (
    PLATE_FIELDS,
    ROD_FIELDS,
    solve_plate_heat,
    solve_rod_bending,
)

logger = logging.getLogger(__name__)

DIFFICULTIES = ("easy", "medium", "hard")


@dataclass(frozen=True)
class ParamSpec:
    name: str
    unit: str
    min: float
    max: float

    def __post_init__(self):
        if not self.min < self.max:
            raise ConfigError(f"parameter {self.name!r}: min {self.min} must be < max {self.max}")


@dataclass(frozen=True)
class TaskSpec:
    """Everything needed to generate and split one synthetic task."""

    name: str
    params: tuple
    field_names: tuple
    dominant: str
    resolution: int
    coord_bounds: tuple = (0.0, 1.0)
    boundaries: dict = field(default_factory=dict)
    displacement_field: str | None = None

    def __post_init__(self):
        names = [p.name for p in self.params]
        if names.count(self.dominant) != 1:
            raise ConfigError(f"dominant parameter {self.dominant!r} must name exactly one parameter")
        if len(set(names)) != len(names):
            raise ConfigError("parameter names must be unique")

    @property
    def param_names(self) -> tuple:
        return tuple(p.name for p in self.params)

    @property
    def dominant_index(self) -> int:
        return self.param_names.index(self.dominant)

    @property
    def dominant_spec(self) -> ParamSpec:
        return self.params[self.dominant_index]

    def lower(self) -> np.ndarray:
        return np.array([p.min for p in self.params])

    def upper(self) -> np.ndarray:
        return np.array([p.max for p in self.params])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["params"] = [asdict(p) for p in self.params]
        d["field_names"] = list(self.field_names)
        d["coord_bounds"] = list(self.coord_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        try:
            return cls(
                name=d["name"],
                params=tuple(ParamSpec(**p) for p in d["params"]),
                field_names=tuple(d["field_names"]),
                dominant=d["dominant"],
                resolution=int(d["resolution"]),
                coord_bounds=tuple(d.get("coord_bounds", (0.0, 1.0))),
                boundaries=dict(d.get("boundaries", {})),
                displacement_field=d.get("displacement_field"),
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid task description: {exc}") from exc

    def with_resolution(self, resolution: int) -> "TaskSpec":
        d = self.to_dict()
        d["resolution"] = resolution
        return TaskSpec.from_dict(d)


PLATE_HEAT = TaskSpec(
    name="plate-heat",
    params=(
        ParamSpec("t_left", "K", 370.0, 400.0),
        ParamSpec("t_right", "K", 300.0, 330.0),
        ParamSpec("conductivity_ratio", "-", 0.5, 2.0),
        ParamSpec("notch_size", "-", 0.1, 0.7),
    ),
    field_names=PLATE_FIELDS,
    dominant="notch_size",
    resolution=24,
    boundaries={"easy": 0.6, "medium": 0.5, "hard": 0.4},
)

ROD_BENDING = TaskSpec(
    name="rod-bending",
    params=(
        ParamSpec("length", "m", 1.0, 3.0),
        ParamSpec("thickness", "m", 0.05, 0.15),
        ParamSpec("load", "N", 100.0, 2000.0),
        ParamSpec("modulus", "Pa", 5.0e10, 2.0e11),
    ),
    field_names=ROD_FIELDS,
    dominant="thickness",
    resolution=200,
    coord_bounds=(0.0, 3.0),
    boundaries={"easy": 0.135, "medium": 0.12, "hard": 0.105},
    displacement_field="deflection",
)

TASKS = {t.name: t for t in (PLATE_HEAT, ROD_BENDING)}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def stratified_draws(task: TaskSpec, n_samples: int, seed: int) -> np.ndarray:
    """Latin-hypercube style draws: one uniform point per equal-width stratum, per parameter."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = task.lower(), task.upper()
    out = np.empty((n_samples, len(task.params)))
    for j in range(len(task.params)):
        u = (np.arange(n_samples) + rng.uniform(size=n_samples)) / n_samples
        out[:, j] = lo[j] + (hi[j] - lo[j]) * rng.permutation(u)
    return out


def _solve_one(job):
    task, params, mesh_seed, sample_id = job
    try:
        if task.name == "plate-heat":
            return solve_plate_heat(params, task.resolution, mesh_seed, sample_id)
        if task.name == "rod-bending":
            return solve_rod_bending(params, task.resolution, sample_id)
    except SolverError as exc:
        raise SolverError(f"sample {sample_id} failed: {exc}", list(map(float, params))) from exc
    raise ConfigError(f"no solver registered for task {task.name!r}")


def build_corpus(task: TaskSpec, n_samples: int, seed: int, workers: int = 1):
    """Generate ``n_samples`` solved samples; deterministic in ``(task, n_samples, seed)``.

    Returns ``(samples, manifest)`` where the manifest lists sample ids with
    their parameter vectors in index order.
    """
    draws = stratified_draws(task, n_samples, seed)
    mesh_seeds = np.random.SeedSequence(seed).generate_state(n_samples, dtype=np.uint32)
    jobs = [
        (task, draws[i], int(mesh_seeds[i]), f"{task.name}-{i:05d}")
        for i in range(n_samples)
    ]
    if workers > 1 and n_samples > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_solve_one, jobs, chunksize=max(1, n_samples // (4 * workers))))
    else:
        samples = [_solve_one(job) for job in jobs]
    manifest = {
        "task": task.name,
        "n_samples": n_samples,
        "seed": seed,
        "samples": [
            {"index": i, "id": s.sample_id, "params": [float(v) for v in s.params]}
            for i, s in enumerate(samples)
        ],
    }
    logger.info("built %d %s samples (seed %d)", n_samples, task.name, seed)
    return samples, manifest


@dataclass
class DomainSplit:
    """Partition of a corpus into source train/val/test and target train/test."""

    difficulty: str
    dominant: str
    boundary: float
    source_range: tuple
    target_range: tuple
    source_train: list
    source_val: list
    source_test: list
    target_train: list
    target_test: list
    target_labels_for_training: bool = False

    def partitions(self) -> dict:
        return {
            "source_train": self.source_train,
            "source_val": self.source_val,
            "source_test": self.source_test,
            "target_train": self.target_train,
            "target_test": self.target_test,
        }

    def source_indices(self) -> set:
        return set(self.source_train) | set(self.source_val) | set(self.source_test)

    def target_indices(self) -> set:
        return set(self.target_train) | set(self.target_test)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source_range"] = list(self.source_range)
        d["target_range"] = list(self.target_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSplit":
        d = dict(d)
        d["source_range"] = tuple(d["source_range"])
        d["target_range"] = tuple(d["target_range"])
        return cls(**d)


def check_boundaries(task: TaskSpec, boundaries: dict) -> None:
    spec = task.dominant_spec
    try:
        b1, b2, b3 = (float(boundaries[k]) for k in DIFFICULTIES)
    except KeyError as exc:
        raise ConfigError(f"missing split boundary for {exc.args[0]!r}") from None
    if not spec.min < b3 < b2 < b1 < spec.max:
        raise ConfigError(
            f"boundaries must satisfy {spec.min} < hard < medium < easy < {spec.max}, "
            f"got easy={b1}, medium={b2}, hard={b3}"
        )


def _fractions(indices: list, shares: tuple) -> list:
    n = len(indices)
    # every non-leading part rounds down; the leading (training) part takes the rest
    tail = [int(np.floor(n * s)) for s in shares[1:]]
    sizes = [n - sum(tail)] + tail
    out, start = [], 0
    for size in sizes:
        out.append(sorted(indices[start:start + size]))
        start += size
    return out


def split_domains(corpus, task: TaskSpec, difficulty: str, boundaries: dict | None = None,
                  seed: int = 0) -> DomainSplit:
    """Assign samples to source/target by the dominant parameter and split each domain."""
    boundaries = dict(boundaries or task.boundaries)
    check_boundaries(task, boundaries)
    if difficulty not in DIFFICULTIES:
        raise ConfigError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")
    b = float(boundaries[difficulty])
    spec = task.dominant_spec
    j = task.dominant_index
    values = np.array([s.params[j] for s in corpus])
    source = [i for i in range(len(corpus)) if values[i] < b]
    target = [i for i in range(len(corpus)) if values[i] >= b]
    for label, members in (("source", source), ("target", target)):
        if len(members) < 4:
            raise InsufficientDataError(
                f"{label} domain for {difficulty} split has {len(members)} samples (need >= 4)"
            )
    rng = np.random.default_rng(seed)
    source = [source[k] for k in rng.permutation(len(source))]
    target = [target[k] for k in rng.permutation(len(target))]
    s_train, s_val, s_test = _fractions(source, (0.5, 0.25, 0.25))
    t_train, t_test = _fractions(target, (0.5, 0.5))
    return DomainSplit(
        difficulty=difficulty,
        dominant=task.dominant,
        boundary=b,
        source_range=(spec.min, b),
        target_range=(b, spec.max),
        source_train=s_train,
        source_val=s_val,
        source_test=s_test,
        target_train=t_train,
        target_test=t_test,
    )
