"""``meshuda`` command line: generate, bench, select, evaluate, verify, report."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import PipelineConfig, load_config, output_root, parse_config, worker_count
from .datagen.corpus import DIFFICULTIES, build_corpus, check_boundaries, split_domains
from .datagen.io import dumps_json, load_dataset, read_manifest, write_dataset
from .datagen.solvers import plate_residual, rod_residual
from .exceptions import ConfigError, FormatError, MeshUDAError, OutputExistsError, PolicyError
from .harness.metrics import evaluate_metrics
from .harness.normalize import NormalizationStats
from .harness.report import DifficultyResult, build_report, write_report
from .harness.sweep import load_runs, run_id_for, sweep_configs, sweep_lambda
from .models import load_checkpoint, read_checkpoint_values
from .selection import AccessLog

logger = logging.getLogger("meshuda")

EXIT_OK, EXIT_FAIL, EXIT_FORMAT, EXIT_AUDIT, EXIT_USAGE = 0, 1, 2, 3, 4
RESIDUAL_TOL = 1e-8


def _csv_list(text: str) -> list:
    return [t.strip() for t in text.split(",") if t.strip()]


def _seed_list(text: str) -> list:
    try:
        return [int(t) for t in _csv_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None


def _echo_config(out_dir: Path, text: str | None) -> None:
    if text is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_bytes(text.encode("utf-8"))


def _guard_output(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputExistsError(f"{path} already exists and is not empty; pass --force to overwrite")
        shutil.rmtree(path)


# ---------------------------------------------------------------------------
# generate

def cmd_generate(args) -> int:
    text = None
    if args.config:
        text = Path(args.config).read_text(encoding="utf-8")
        cfg = parse_config(text)
    else:
        cfg = PipelineConfig()
    overrides = {"task": args.task, "n_samples": args.n, "seed": args.seed, "resolution": args.resolution}
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.boundaries:
        try:
            cfg.boundaries = {k: float(v) for k, v in (kv.split("=") for kv in _csv_list(args.boundaries))}
        except ValueError:
            raise ConfigError("--boundaries expects easy=..,medium=..,hard=..") from None
    cfg.validate()
    task = cfg.task_spec()
    out = Path(args.out) if args.out else Path(cfg.dataset)
    difficulties = [args.difficulty] if args.difficulty else list(DIFFICULTIES)
    boundaries = cfg.split_boundaries()
    plan = {"task": task.name, "n_samples": cfg.n_samples, "seed": cfg.seed, "resolution": task.resolution,
            "out": str(out), "difficulties": difficulties, "boundaries": boundaries}
    if args.dry_run:
        print(dumps_json({"dry_run": True, **plan}), end="")
        return EXIT_OK
    _guard_output(out, args.force)
    samples, _ = build_corpus(task, cfg.n_samples, cfg.seed, worker_count(args.workers))
    splits = {d: split_domains(samples, task, d, boundaries, cfg.seed) for d in difficulties}
    write_dataset(out, task, samples, splits, cfg.seed, boundaries, force=True)
    _echo_config(out, text)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench

def _sweep_plan(cfg: PipelineConfig, difficulty: str, seeds, base) -> list:
    grid = cfg.grid() if difficulty in cfg.swept() else [0.0]
    return sweep_configs(base, cfg.kinds, grid, seeds)


def _determinism_manifest(root: Path) -> dict:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name in
                   ("checkpoint.bin", "cache.bin", "summary.csv", "scaling.csv", "per_sample.csv"))
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest() for p in files}


def cmd_bench(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8")
    cfg = parse_config(text)
    if args.profile:
        cfg.train = {**cfg.train, "profile": args.profile}
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.strategies:
        cfg.strategies = _csv_list(args.strategies)
    if args.difficulty:
        cfg.difficulties = [args.difficulty]
        cfg.sweep_difficulties = [args.difficulty]
    cfg.validate()
    root = output_root(cfg, args.out)
    base = cfg.train_config()
    dataset_dir = Path(cfg.dataset)
    plan = {d: [run_id_for(c) for c in _sweep_plan(cfg, d, cfg.seeds, base)] for d in cfg.difficulties}
    if args.dry_run:
        print(dumps_json({"dry_run": True, "output_root": str(root), "dataset": str(dataset_dir), "runs": plan}),
              end="")
        return EXIT_OK
    if not (dataset_dir / "manifest.json").exists():
        raise ConfigError(f"dataset {dataset_dir} not found; run 'meshuda generate' first (field 'dataset')")
    _guard_output(root, args.force)
    dataset = load_dataset(dataset_dir)
    task = dataset.task
    log = AccessLog()
    workers = worker_count(args.workers)
    results = []
    for difficulty in cfg.difficulties:
        if difficulty not in dataset.splits:
            raise ConfigError(f"dataset has no {difficulty!r} split (field 'difficulties')")
        split = dataset.split(difficulty)
        grid = cfg.grid() if difficulty in cfg.swept() else [0.0]
        sweep_dir = root / "runs" / f"{task.name}-{difficulty}-{base.architecture}"
        runs = sweep_lambda(base, task, dataset.samples, split, cfg.kinds, grid, cfg.seeds, sweep_dir, workers, log)
        results.append(DifficultyResult(difficulty, split, runs, len(task.field_names)))
    report = build_report(results, cfg.kinds, cfg.strategies, log)
    write_report(report, root / "report", task.field_names)
    timing = {f"{res.difficulty}/{r.run_id}": r.wall_seconds for res in results for r in res.runs}
    (root / "timing.json").write_text(dumps_json(timing), encoding="utf-8")
    _echo_config(root, text)
    # the echo is byte-identical to the input; CLI overrides are recorded beside it
    effective = {"seeds": cfg.seeds, "strategies": cfg.strategies, "difficulties": cfg.difficulties,
                 "sweep_difficulties": cfg.swept(), "train": cfg.train}
    (root / "bench.json").write_text(dumps_json(effective), encoding="utf-8")
    (root / "determinism.json").write_text(dumps_json(_determinism_manifest(root)), encoding="utf-8")
    status = EXIT_OK
    if report.audit.get("non_oracle_reads", 0):
        print(f"AUDIT FAIL: {report.audit['non_oracle_reads']} non-oracle target-label reads", file=sys.stderr)
        status = EXIT_AUDIT
    for cell in report.unstable:
        print(f"UNSTABLE QUORUM FAIL: {cell['cell']} has {cell['unstable']}/{cell['total']} unstable runs "
              f"({', '.join(cell['runs'])})", file=sys.stderr)
        status = EXIT_AUDIT
    print(f"summary written to {root / 'report' / 'summary.csv'}")
    return status


# ---------------------------------------------------------------------------
# select / report (re-run on existing sweeps)

def _bench_context(bench_dir: Path):
    cfg = load_config(bench_dir / "config.json")
    effective = bench_dir / "bench.json"
    if effective.exists():
        for key, value in json.loads(effective.read_text(encoding="utf-8")).items():
            setattr(cfg, key, value)
    dataset = load_dataset(cfg.dataset)
    return cfg, dataset


def _load_results(cfg, dataset, bench_dir: Path, log: AccessLog) -> list:
    results = []
    arch = cfg.train_config().architecture
    for difficulty in cfg.difficulties:
        split = dataset.split(difficulty)
        sweep_dir = bench_dir / "runs" / f"{dataset.task.name}-{difficulty}-{arch}"
        runs = load_runs(sweep_dir, dataset.task, dataset.samples, split, log)
        results.append(DifficultyResult(difficulty, split, runs, len(dataset.task.field_names)))
    return results


def cmd_select(args) -> int:
    bench_dir = Path(args.bench_dir)
    cfg, dataset = _bench_context(bench_dir)
    strategies = _csv_list(args.strategies) if args.strategies else cfg.strategies
    from .harness.report import per_seed_selection
    log = AccessLog()
    out = {}
    for res in _load_results(cfg, dataset, bench_dir, log):
        for kind in cfg.kinds:
            for strategy in strategies:
                if strategy == "TB" and args.no_oracle:
                    raise PolicyError("TB selection requested with --no-oracle")
                picks = per_seed_selection(res.runs, kind, strategy)
                out[f"{res.difficulty}/{kind}/{strategy}"] = [p.to_dict() for p in picks]
    doc = dumps_json({"selections": out, "oracle_access": log.summary(), "oracle_log": log.entries})
    if args.dry_run or not args.out:
        print(doc, end="")
    else:
        Path(args.out).write_text(doc, encoding="utf-8")
    return EXIT_OK


def cmd_report(args) -> int:
    bench_dir = Path(args.bench_dir)
    cfg, dataset = _bench_context(bench_dir)
    log = AccessLog()
    report = build_report(_load_results(cfg, dataset, bench_dir, log), cfg.kinds, cfg.strategies, log)
    if args.dry_run:
        print(dumps_json({"dry_run": True, "summary_rows": len(report.summary), "audit": report.audit}), end="")
        return EXIT_OK
    paths = write_report(report, Path(args.out) if args.out else bench_dir / "report", dataset.task.field_names)
    print(f"summary written to {paths['summary']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    sidecar = json.loads(Path(args.checkpoint).with_suffix(".json").read_text(encoding="utf-8"))
    if "normalization" not in sidecar:
        raise ConfigError("checkpoint sidecar lacks normalization statistics")
    stats = NormalizationStats.from_dict(sidecar["normalization"])
    dataset = load_dataset(args.dataset)
    split = dataset.split(args.difficulty)
    if args.partition.startswith("target") and not args.oracle:
        raise PolicyError(f"{args.partition} holds target labels; pass --oracle for final reporting")
    idx = split.partitions()[args.partition]
    report = evaluate_metrics(model, [dataset.samples[i] for i in idx], stats, args.partition,
                              dataset.task.displacement_field)
    doc = dumps_json(report.to_dict())
    if args.out and not args.dry_run:
        Path(args.out).write_text(doc, encoding="utf-8")
    else:
        print(doc, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify

def _verify_dataset(root: Path, checks: list) -> None:
    manifest = read_manifest(root)
    ds = load_dataset(root)  # raises FormatError with the byte offset on corrupt files
    checks.append(("sample headers", True, f"{len(ds.samples)} files parsed"))
    res_fn = plate_residual if ds.task.name == "plate-heat" else rod_residual
    worst = max(res_fn(s) for s in ds.samples)
    checks.append(("solver residuals", worst < RESIDUAL_TOL, f"max relative residual {worst:.3e}"))
    n = len(ds.samples)
    for name, split in sorted(ds.splits.items()):
        parts = split.partitions()
        flat = [i for idx in parts.values() for i in idx]
        ok = len(flat) == len(set(flat)) and set(flat) == set(range(n))
        detail = "disjoint and complete" if ok else (
            f"{len(flat) - len(set(flat))} duplicated indices, {n - len(set(flat) & set(range(n)))} missing")
        checks.append((f"split disjointness [{name}]", ok, detail))
    if manifest.get("boundaries"):
        try:
            check_boundaries(ds.task, manifest["boundaries"])
            checks.append(("boundaries", True, "ordered inside the dominant range"))
        except ConfigError as exc:
            checks.append(("boundaries", False, str(exc)))


def _verify_runs(root: Path, checks: list) -> None:
    ckpts = sorted(root.rglob("checkpoint.bin"))
    bad = []
    for ckpt in ckpts:
        values = read_checkpoint_values(ckpt)
        if not np.isfinite(values).all():
            bad.append(str(ckpt.relative_to(root)))
    checks.append(("checkpoint finiteness", not bad and bool(ckpts),
                   f"{len(ckpts)} checkpoints" + (f", non-finite: {bad}" if bad else "")))
    for sel in sorted(root.rglob("selection.json")):
        doc = json.loads(sel.read_text(encoding="utf-8"))
        reads = doc.get("oracle_access", {}).get("non_oracle_reads")
        checks.append(("oracle access log", reads == 0, f"{reads} non-oracle target-label reads"))


def cmd_verify(args) -> int:
    root = Path(args.path)
    checks: list = []
    try:
        if (root / "manifest.json").exists():
            _verify_dataset(root, checks)
        if any(root.rglob("checkpoint.bin")):
            _verify_runs(root, checks)
    except FormatError as exc:
        print(f"FAIL format: {exc}")
        return EXIT_FORMAT
    if not checks:
        print(f"FAIL layout: {root} is neither a dataset nor a run directory")
        return EXIT_FAIL
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in checks) else EXIT_FAIL


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="meshuda", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate a corpus with its domain splits")
    g.add_argument("config", nargs="?")
    g.add_argument("--task", choices=["plate-heat", "rod-bending"])
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--resolution", type=int)
    g.add_argument("--out")
    g.add_argument("--difficulty", choices=DIFFICULTIES)
    g.add_argument("--boundaries", help="easy=..,medium=..,hard=..")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="sweep, select, evaluate and report")
    b.add_argument("config")
    b.add_argument("--out")
    b.add_argument("--seeds", type=_seed_list)
    b.add_argument("--strategies")
    b.add_argument("--difficulty", choices=DIFFICULTIES)
    b.add_argument("--profile", choices=["paper", "desk"])
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("select", help="re-run model selection on a finished bench")
    s.add_argument("bench_dir")
    s.add_argument("--strategies")
    s.add_argument("--no-oracle", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_select)

    e = sub.add_parser("evaluate", help="metrics for one checkpoint on one partition")
    e.add_argument("checkpoint")
    e.add_argument("--dataset", required=True)
    e.add_argument("--difficulty", choices=DIFFICULTIES, default="medium")
    e.add_argument("--partition", default="source_test",
                   choices=["source_train", "source_val", "source_test", "target_train", "target_test"])
    e.add_argument("--oracle", action="store_true", help="allow reading target labels (final reporting)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify", help="audit a dataset or bench directory")
    v.add_argument("path")
    v.set_defaults(func=cmd_verify)

    r = sub.add_parser("report", help="rebuild result tables from a finished bench")
    r.add_argument("bench_dir")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    for sp in (g, b, s, e, v, r):
        sp.add_argument("--workers", type=int)
        sp.add_argument("--force", action="store_true")
        sp.add_argument("--dry-run", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (ConfigError, OutputExistsError, PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MeshUDAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
