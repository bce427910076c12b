"""Synthetic steady-state corpora and source/target domain splits."""
from .corpus import (
    DIFFICULTIES,
    PLATE_HEAT,
    ROD_BENDING,
    TASKS,
    DomainSplit,
    ParamSpec,
    TaskSpec,
    build_corpus,
    get_task,
    split_domains,
    stratified_draws,
)
from .io import Dataset, load_dataset, read_sample, write_dataset, write_sample
from .solvers import (
    MeshSample,
    plate_residual,
    rod_residual,
    solve_plate_heat,
    solve_rod_bending,
)

__all__ = [
    "DIFFICULTIES",
    "PLATE_HEAT",
    "ROD_BENDING",
    "TASKS",
    "Dataset",
    "DomainSplit",
    "MeshSample",
    "ParamSpec",
    "TaskSpec",
    "build_corpus",
    "get_task",
    "load_dataset",
    "plate_residual",
    "read_sample",
    "rod_residual",
    "solve_plate_heat",
    "solve_rod_bending",
    "split_domains",
    "stratified_draws",
    "write_dataset",
    "write_sample",
]
