"""Single runs, lambda sweeps and the on-disk run directory layout.

A run directory holds::

    config.json       run id, task, difficulty and the full train config
    checkpoint.bin    EMA weights (plus checkpoint.json sidecar)
    loss_curve.csv    epoch, recon, da, total, source_val
    cache.bin         source-val losses, source-val latents, target-train latents
    metrics.json      source-domain metrics and stability flags

Target-test metrics are never computed here. They are attached to each
:class:`RunRecord` as a sealed, lazily evaluated accessor.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from ..datagen.corpus import DomainSplit, TaskSpec
from ..datagen.io import dumps_json, read_arrays, write_arrays
from ..exceptions import ConfigError, MeshUDAError
from ..models import ModelConfig, SurrogateModel, load_checkpoint, save_checkpoint
from ..selection import AccessLog, RunRecord, SealedMetrics
from .metrics import evaluate_metrics
from .normalize import FieldNormalizer, NormalizationStats
from .training import TrainConfig, fit_surrogate

logger = logging.getLogger(__name__)

PAPER_GRID = tuple(10.0 ** -k for k in range(1, 10))
DESK_GRID = (1e-1, 1e-2, 1e-3, 1e-4, 0.0)
DEFAULT_SEEDS = (0, 1, 2, 3)
CURVE_COLUMNS = ("epoch", "recon", "da", "total", "source_val")


def run_id_for(config: TrainConfig) -> str:
    return f"{config.architecture}-{config.uda.kind}-lam{config.uda.lam:g}-s{config.seed}"


def sweep_configs(base: TrainConfig, kinds, grid, seeds) -> list:
    """Configs for every (kind, lambda, seed); lambda = 0 collapses to one unregularized run per seed."""
    grid = list(grid)
    if not grid:
        raise ConfigError("lambda grid is empty")
    if any(lam < 0 for lam in grid):
        raise ConfigError("lambda values must be nonnegative")
    out = {}
    for seed in seeds:
        seeded = TrainConfig.from_dict({**base.to_dict(), "seed": int(seed)})
        for lam in grid:
            for kind in (kinds if lam > 0 else ["none"]):
                cfg = seeded.with_uda(kind, float(lam))
                out[run_id_for(cfg)] = cfg
        # the unregularized baseline is always part of the pool
        cfg = seeded.with_uda("none", 0.0)
        out.setdefault(run_id_for(cfg), cfg)
    return [out[k] for k in sorted(out)]


def _subset(samples, idx):
    return [samples[i] for i in idx]


def _curve_csv(curve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for row in curve:
        writer.writerow(["" if row[c] is None else repr(float(row[c])) if c != "epoch" else row[c]
                         for c in CURVE_COLUMNS])
    return buf.getvalue()


def execute_run(config: TrainConfig, task: TaskSpec, samples, split: DomainSplit,
                run_dir=None, stats: NormalizationStats | None = None) -> dict:
    """Train one configuration and return a picklable payload (no target labels involved)."""
    run_id = run_id_for(config)
    started = time.perf_counter()
    src_train = _subset(samples, split.source_train)
    src_val = _subset(samples, split.source_val)
    target_params = np.array([samples[i].params for i in split.target_train])
    normalizer = FieldNormalizer.from_stats(stats) if stats is not None else None
    result = fit_surrogate(config, task, src_train, src_val, target_params, normalizer)
    stats = result.normalizer.stats
    payload = {
        "run_id": run_id,
        "config": config.to_dict(),
        "model_config": result.model.config.to_dict(),
        "weights": result.model.get_flat(),
        "stats": stats.to_dict(),
        "val_losses": result.val_losses,
        "z_val": result.z_val,
        "z_target": result.z_target,
        "unstable": result.unstable,
        "diagnostics": result.diagnostics,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "curve": result.curve,
        "checkpoint": None,
    }
    metrics = {"unstable": result.unstable, "diagnostics": result.diagnostics,
               "best_epoch": result.best_epoch, "epochs_run": result.epochs_run}
    if not result.unstable:
        metrics["source_val_loss"] = result.source_val_loss
        for name, idx in (("source_val", split.source_val), ("source_test", split.source_test)):
            metrics[name] = evaluate_metrics(result.model, _subset(samples, idx), stats, name,
                                             task.displacement_field).to_dict(include_samples=True)
    payload["metrics"] = metrics
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(dumps_json({
            "run_id": run_id, "task": task.name, "difficulty": split.difficulty, "train": config.to_dict(),
        }), encoding="utf-8")
        ckpt = run_dir / "checkpoint.bin"
        save_checkpoint(ckpt, result.model, {"run_id": run_id, "normalization": stats.to_dict()})
        (run_dir / "loss_curve.csv").write_text(_curve_csv(result.curve), encoding="utf-8")
        write_arrays(run_dir / "cache.bin", [result.val_losses, result.z_val, result.z_target])
        (run_dir / "metrics.json").write_text(dumps_json(metrics), encoding="utf-8")
        payload["checkpoint"] = str(ckpt)
    # timing stays out of the run directory so reruns stay byte-identical
    payload["seconds"] = time.perf_counter() - started
    return payload


def _target_evaluator(model_config: dict, weights, stats: dict, samples, split: DomainSplit, task: TaskSpec):
    def evaluate():
        model = SurrogateModel(ModelConfig.from_dict(model_config))
        model.set_flat(weights)
        return evaluate_metrics(model, _subset(samples, split.target_test), NormalizationStats.from_dict(stats),
                                "target_test", task.displacement_field)
    return evaluate


def record_from_payload(payload: dict, task: TaskSpec, samples, split: DomainSplit, log: AccessLog) -> RunRecord:
    cfg = payload["config"]
    flat_cfg = {"architecture": cfg["architecture"], "kind": cfg["uda"]["kind"], "lam": cfg["uda"]["lam"],
                "seed": cfg["seed"], "difficulty": split.difficulty}
    sealed = None
    if not payload["unstable"]:
        sealed = SealedMetrics(payload["run_id"], _target_evaluator(
            payload["model_config"], payload["weights"], payload["stats"], samples, split, task), log)
    return RunRecord(
        run_id=payload["run_id"], config=flat_cfg, checkpoint=payload["checkpoint"],
        val_losses=payload["val_losses"], z_val=payload["z_val"], z_target=payload["z_target"],
        target_metrics=sealed, source_metrics=payload["metrics"], unstable=payload["unstable"],
        wall_seconds=payload.get("seconds"),
    )


def train_run(config: TrainConfig, split: DomainSplit, task: TaskSpec, samples, run_dir=None,
              log: AccessLog | None = None) -> RunRecord:
    """Train one configuration on ``split`` and return its :class:`RunRecord`."""
    payload = execute_run(config, task, samples, split, run_dir)
    return record_from_payload(payload, task, samples, split, log if log is not None else AccessLog())


# ---------------------------------------------------------------------------
# sweeps

_WORKER_STATE: dict = {}


def _init_worker(task, samples, split, out_dir):
    _WORKER_STATE.update(task=task, samples=samples, split=split, out_dir=out_dir)


def _safe_execute(config: TrainConfig, task, samples, split, out_dir):
    run_dir = None if out_dir is None else Path(out_dir) / run_id_for(config)
    try:
        return execute_run(config, task, samples, split, run_dir)
    except (MeshUDAError, ArithmeticError, ValueError) as exc:
        logger.error("run %s failed: %s", run_id_for(config), exc)
        return {"run_id": run_id_for(config), "config": config.to_dict(), "failed": repr(exc)}


def _worker_run(config: TrainConfig):
    s = _WORKER_STATE
    return _safe_execute(config, s["task"], s["samples"], s["split"], s["out_dir"])


def _failed_record(payload: dict, split: DomainSplit) -> RunRecord:
    cfg = payload["config"]
    return RunRecord(
        run_id=payload["run_id"],
        config={"architecture": cfg["architecture"], "kind": cfg["uda"]["kind"], "lam": cfg["uda"]["lam"],
                "seed": cfg["seed"], "difficulty": split.difficulty},
        checkpoint=None, val_losses=np.zeros(0), z_val=np.zeros((0, 0)), z_target=np.zeros((0, 0)),
        source_metrics={"unstable": True, "diagnostics": {"error": payload["failed"]}}, unstable=True,
    )


def sweep_lambda(base: TrainConfig, task: TaskSpec, samples, split: DomainSplit, kinds=("cmd",),
                 grid=DESK_GRID, seeds=DEFAULT_SEEDS, out_dir=None, workers: int = 1,
                 log: AccessLog | None = None) -> list:
    """Train every configuration of the sweep; one failed run does not stop the rest.

    Records come back sorted by run id regardless of the worker count.
    """
    configs = sweep_configs(base, kinds, grid, seeds)
    log = log if log is not None else AccessLog()
    if workers > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(task, samples, split, out_dir)) as pool:
            payloads = list(pool.map(_worker_run, configs))
    else:
        payloads = [_safe_execute(c, task, samples, split, out_dir) for c in configs]
    records = []
    for p in payloads:
        if "failed" in p:
            records.append(_failed_record(p, split))
        else:
            records.append(record_from_payload(p, task, samples, split, log))
    return sorted(records, key=lambda r: r.run_id)


def load_run(run_dir, task: TaskSpec, samples, split: DomainSplit, log: AccessLog) -> RunRecord:
    """Rebuild a :class:`RunRecord` from a run directory."""
    run_dir = Path(run_dir)
    config = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    metrics = json.loads((run_dir / "metrics.json").read_text(encoding="utf-8"))
    val_losses, z_val, z_target = read_arrays(run_dir / "cache.bin")
    ckpt = run_dir / "checkpoint.bin"
    model = load_checkpoint(ckpt)
    sidecar = json.loads(ckpt.with_suffix(".json").read_text(encoding="utf-8"))
    payload = {
        "run_id": config["run_id"], "config": config["train"], "model_config": model.config.to_dict(),
        "weights": model.get_flat(), "stats": sidecar["normalization"], "val_losses": val_losses.reshape(-1),
        "z_val": z_val, "z_target": z_target, "unstable": metrics["unstable"], "metrics": metrics,
        "checkpoint": str(ckpt),
    }
    return record_from_payload(payload, task, samples, split, log)


def load_runs(sweep_dir, task: TaskSpec, samples, split: DomainSplit, log: AccessLog) -> list:
    sweep_dir = Path(sweep_dir)
    dirs = sorted(p for p in sweep_dir.iterdir() if (p / "config.json").exists())
    return [load_run(d, task, samples, split, log) for d in dirs]

