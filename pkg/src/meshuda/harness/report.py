"""Per-seed selection over a run pool and the result tables built from it."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..datagen.corpus import DomainSplit
from ..datagen.io import dumps_json
from ..selection import STRATEGIES, AccessLog, RunRecord, select_model, target_nrmse

SUMMARY_COLUMNS = ("difficulty", "architecture", "kind", "strategy", "domain", "nrmse_mean", "nrmse_std",
                   "nrmse_field_avg", "difference", "n_seeds", "chosen")
SCALING_COLUMNS = ("difficulty", "boundary", "target_width", "no_uda_source", "no_uda_target",
                   "no_uda_target_std", "best_uda", "best_uda_target", "tb_target")


@dataclass
class DifficultyResult:
    difficulty: str
    split: DomainSplit
    runs: list
    n_fields: int = 1


@dataclass
class Report:
    summary: list = field(default_factory=list)
    scaling: list = field(default_factory=list)
    per_sample: list = field(default_factory=list)
    selections: dict = field(default_factory=dict)
    unstable: list = field(default_factory=list)
    audit: dict = field(default_factory=dict)


def pool_for(runs, kind: str, seed: int) -> list:
    """Runs of one seed regularized with ``kind``, plus the unregularized runs of that seed."""
    return [r for r in runs if r.seed == seed and r.config["kind"] in (kind, "none")]


def per_seed_selection(runs, kind: str, strategy: str) -> list:
    out = []
    for seed in sorted({r.seed for r in runs}):
        pool = pool_for(runs, kind, seed)
        if any(not r.unstable for r in pool):
            out.append(select_model(pool, strategy))
    return out


def _stats(values) -> tuple:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def unstable_cells(runs, threshold: float = 0.5) -> list:
    """Diagnoses for (difficulty, architecture, kind) cells where more than ``threshold`` of runs diverged."""
    cells: dict = {}
    for r in runs:
        key = (r.config.get("difficulty", ""), r.config["architecture"], r.config["kind"])
        cells.setdefault(key, []).append(r)
    out = []
    for key in sorted(cells):
        members = cells[key]
        bad = [r.run_id for r in members if r.unstable]
        if len(bad) > threshold * len(members):
            out.append({"cell": "/".join(key), "unstable": len(bad), "total": len(members), "runs": bad})
    return out


def build_report(results, kinds, strategies=STRATEGIES, log: AccessLog | None = None) -> Report:
    """Fold completed run pools into the summary, scaling and per-sample tables.

    Target-test metrics are read through the sealed accessor with purpose
    ``"report"`` (or ``"TB"`` inside oracle selection).
    """
    report = Report()
    order = sorted(results, key=lambda res: res.split.target_range[1] - res.split.target_range[0])
    all_runs = []
    for res in order:
        runs = sorted(res.runs, key=lambda r: r.run_id)
        all_runs.extend(runs)
        stable = [r for r in runs if not r.unstable]
        if not stable:
            continue
        arch = stable[0].config["architecture"]

        def target(r: RunRecord) -> float:
            return target_nrmse(r.target_metrics.read("report"))

        def source(r: RunRecord) -> float:
            return float(r.source_metrics["source_test"]["nrmse"])

        baseline = [r for r in stable if r.config["kind"] == "none"]
        base_t = _stats([target(r) for r in baseline])
        base_s = _stats([source(r) for r in baseline])
        for domain, (mean, std) in (("source", base_s), ("target", base_t)):
            report.summary.append({
                "difficulty": res.difficulty, "architecture": arch, "kind": "none", "strategy": "baseline",
                "domain": domain, "nrmse_mean": mean, "nrmse_std": std, "nrmse_field_avg": mean / res.n_fields,
                "difference": 0.0, "n_seeds": len(baseline), "chosen": ";".join(r.run_id for r in baseline),
            })
        by_id = {r.run_id: r for r in runs}
        cell_means = {}
        present = [k for k in kinds if any(r.config["kind"] == k for r in runs)]
        for kind in present:
            for strategy in strategies:
                picks = per_seed_selection(runs, kind, strategy)
                report.selections[f"{res.difficulty}/{kind}/{strategy}"] = [p.to_dict() for p in picks]
                chosen = [by_id[p.chosen] for p in picks]
                for domain, fn, ref in (("source", source, base_s[0]), ("target", target, base_t[0])):
                    mean, std = _stats([fn(r) for r in chosen])
                    report.summary.append({
                        "difficulty": res.difficulty, "architecture": arch, "kind": kind, "strategy": strategy,
                        "domain": domain, "nrmse_mean": mean, "nrmse_std": std,
                        "nrmse_field_avg": mean / res.n_fields, "difference": mean - ref,
                        "n_seeds": len(chosen), "chosen": ";".join(r.run_id for r in chosen),
                    })
                    if domain == "target":
                        cell_means[(kind, strategy)] = mean
        unsupervised = {k: v for k, v in cell_means.items() if k[1] != "TB"}
        best = min(unsupervised, key=lambda k: (unsupervised[k], k)) if unsupervised else None
        tb = [v for k, v in cell_means.items() if k[1] == "TB"]
        lo, hi = res.split.target_range
        report.scaling.append({
            "difficulty": res.difficulty, "boundary": res.split.boundary, "target_width": hi - lo,
            "no_uda_source": base_s[0], "no_uda_target": base_t[0], "no_uda_target_std": base_t[1],
            "best_uda": "/".join(best) if best else "", "best_uda_target": unsupervised.get(best),
            "tb_target": min(tb) if tb else None,
        })
        for r in stable:
            tm = r.target_metrics.read("report")
            for domain, ids, rows in (
                ("source_test", r.source_metrics["source_test"]["sample_ids"],
                 r.source_metrics["source_test"]["per_sample"]),
                ("target_test", tm.sample_ids, tm.per_sample.tolist()),
            ):
                for sid, errs in zip(ids, rows):
                    report.per_sample.append([res.difficulty, r.run_id, domain, sid, *errs])
    report.unstable = unstable_cells(all_runs)
    if log is not None:
        report.audit = log.summary()
    return report


def _csv(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) if isinstance(row, dict) else _fmt(row[i]) for i, c in enumerate(columns)])
    return buf.getvalue()


def write_report(report: Report, out_dir, field_names=()) -> dict:
    """Write summary.csv, scaling.csv, per_sample.csv and selection.json; returns their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sample_cols = ("difficulty", "run_id", "domain", "sample_id", *field_names)
    files = {
        "summary": ("summary.csv", _csv(SUMMARY_COLUMNS, report.summary)),
        "scaling": ("scaling.csv", _csv(SCALING_COLUMNS, report.scaling)),
        "per_sample": ("per_sample.csv", _csv(sample_cols, report.per_sample)),
        "selection": ("selection.json", dumps_json({
            "selections": report.selections, "unstable_cells": report.unstable, "oracle_access": report.audit,
        })),
    }
    paths = {}
    for key, (name, text) in files.items():
        (out_dir / name).write_text(text, encoding="utf-8")
        paths[key] = out_dir / name
    return paths
