"""Binary sample files, array blobs and the dataset manifest.

Every binary file starts with a 16-byte header: a 12-byte ASCII magic tag and
a little-endian uint32 format version. Sample files continue with uint64
counts ``(N, d, C, F)`` followed by coords (f8), cells (u8), params (f8) and
fields (f8), all little-endian and row-major. The parameter count is not in
the header; it comes from the manifest, or is inferred from the file size.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..exceptions import FormatError, OutputExistsError
from .corpus import DomainSplit, TaskSpec
from .solvers import MeshSample

VERSION = 1
SAMPLE_MAGIC = b"MESHUDA-SMPL"
ARRAY_MAGIC = b"MESHUDA-ARRY"
HEADER = struct.Struct("<12sI")
COUNTS = struct.Struct("<4Q")
F8 = np.dtype("<f8")
U8 = np.dtype("<u8")

DATASET_FORMAT = "meshuda-dataset"


def _header(magic: bytes) -> bytes:
    return HEADER.pack(magic, VERSION)


def _check_header(buf: bytes, magic: bytes, path) -> None:
    if len(buf) < HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(buf))
    tag, version = HEADER.unpack_from(buf, 0)
    if tag != magic:
        raise FormatError(f"{path}: bad magic {tag!r}, expected {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=12)


def sample_to_bytes(sample: MeshSample) -> bytes:
    n, d = sample.coords.shape
    c = sample.cells.shape[0]
    f = sample.fields.shape[1]
    parts = [
        _header(SAMPLE_MAGIC),
        COUNTS.pack(n, d, c, f),
        np.ascontiguousarray(sample.coords, dtype=F8).tobytes(),
        np.ascontiguousarray(sample.cells, dtype=U8).tobytes(),
        np.ascontiguousarray(sample.params, dtype=F8).tobytes(),
        np.ascontiguousarray(sample.fields, dtype=F8).tobytes(),
    ]
    return b"".join(parts)


def sample_from_bytes(buf: bytes, n_params: int | None = None, sample_id: str = "",
                      param_names=(), field_names=(), path="<bytes>") -> MeshSample:
    _check_header(buf, SAMPLE_MAGIC, path)
    off = HEADER.size
    if len(buf) < off + COUNTS.size:
        raise FormatError(f"{path}: truncated count block", offset=len(buf))
    n, d, c, f = COUNTS.unpack_from(buf, off)
    off += COUNTS.size
    if d not in (1, 2) or n == 0 or f == 0:
        raise FormatError(f"{path}: implausible counts N={n} d={d} C={c} F={f}", offset=HEADER.size)
    fixed = 8 * (n * d + c * (d + 1) + n * f)
    if n_params is None:
        extra = len(buf) - off - fixed
        if extra < 0 or extra % 8:
            raise FormatError(f"{path}: payload size does not match counts", offset=len(buf))
        n_params = extra // 8
    expected = off + fixed + 8 * n_params
    if len(buf) < expected:
        raise FormatError(f"{path}: truncated payload, expected {expected} bytes", offset=len(buf))
    if len(buf) > expected:
        raise FormatError(f"{path}: {len(buf) - expected} trailing bytes", offset=expected)

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += count * 8
        return arr

    coords = take(n * d, F8).reshape(n, d).astype(np.float64)
    cells = take(c * (d + 1), U8).reshape(c, d + 1).astype(np.int64)
    params = take(n_params, F8).astype(np.float64)
    fields = take(n * f, F8).reshape(n, f).astype(np.float64)
    if c and cells.max() >= n:
        raise FormatError(f"{path}: cell index out of range", offset=HEADER.size + COUNTS.size + 8 * n * d)
    return MeshSample(coords, cells, params, fields, sample_id, tuple(param_names), tuple(field_names))


def write_sample(path, sample: MeshSample) -> None:
    Path(path).write_bytes(sample_to_bytes(sample))


def read_sample(path, n_params: int | None = None, sample_id: str | None = None,
                param_names=(), field_names=()) -> MeshSample:
    path = Path(path)
    return sample_from_bytes(path.read_bytes(), n_params, sample_id or path.stem,
                             param_names, field_names, path)


def arrays_to_bytes(arrays) -> bytes:
    """Serialize a list of rank-1/rank-2 float arrays (rank-1 stored as N x 1)."""
    parts = [_header(ARRAY_MAGIC), struct.pack("<Q", len(arrays))]
    for arr in arrays:
        arr = np.asarray(arr, dtype=np.float64)
        arr2 = arr.reshape(arr.shape[0], -1) if arr.ndim else arr.reshape(1, 1)
        parts.append(struct.pack("<2Q", *arr2.shape))
        parts.append(np.ascontiguousarray(arr2, dtype=F8).tobytes())
    return b"".join(parts)


def arrays_from_bytes(buf: bytes, path="<bytes>") -> list:
    _check_header(buf, ARRAY_MAGIC, path)
    off = HEADER.size
    if len(buf) < off + 8:
        raise FormatError(f"{path}: truncated array count", offset=len(buf))
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    out = []
    for _ in range(count):
        if len(buf) < off + 16:
            raise FormatError(f"{path}: truncated array header", offset=len(buf))
        rows, cols = struct.unpack_from("<2Q", buf, off)
        off += 16
        nbytes = 8 * rows * cols
        if len(buf) < off + nbytes:
            raise FormatError(f"{path}: truncated array payload", offset=len(buf))
        out.append(np.frombuffer(buf, dtype=F8, count=rows * cols, offset=off).reshape(rows, cols).astype(np.float64))
        off += nbytes
    if off != len(buf):
        raise FormatError(f"{path}: trailing bytes", offset=off)
    return out


def write_arrays(path, arrays) -> None:
    Path(path).write_bytes(arrays_to_bytes(arrays))


def read_arrays(path) -> list:
    path = Path(path)
    return arrays_from_bytes(path.read_bytes(), path)


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


@dataclass
class Dataset:
    root: Path
    task: TaskSpec
    samples: list
    splits: dict
    manifest: dict

    def split(self, difficulty: str) -> DomainSplit:
        return self.splits[difficulty]


def write_dataset(root, task: TaskSpec, samples, splits: dict, seed: int,
                  boundaries: dict | None = None, force: bool = False, extra: dict | None = None) -> dict:
    """Write sample files plus ``manifest.json``; returns the manifest."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise OutputExistsError(f"{root} exists; pass force to overwrite")
    (root / "samples").mkdir(parents=True, exist_ok=True)
    table = []
    for i, s in enumerate(samples):
        rel = f"samples/{s.sample_id}.bin"
        write_sample(root / rel, s)
        table.append({"index": i, "id": s.sample_id, "file": rel, "n_nodes": int(s.n_nodes),
                      "params": [float(v) for v in s.params]})
    manifest = {
        "format": DATASET_FORMAT,
        "version": VERSION,
        "task": task.to_dict(),
        "seed": seed,
        "boundaries": dict(boundaries or task.boundaries),
        "samples": table,
        "splits": {k: v.to_dict() for k, v in splits.items()},
        "target_labels": "stored for oracle evaluation only; not available for training",
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(dumps_json(manifest), encoding="utf-8")
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg})", offset=exc.pos) from exc
    if manifest.get("format") != DATASET_FORMAT:
        raise FormatError(f"{path}: not a dataset manifest", offset=0)
    return manifest


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    task = TaskSpec.from_dict(manifest["task"])
    n_params = len(task.params)
    samples = [
        read_sample(root / entry["file"], n_params, entry["id"], task.param_names, task.field_names)
        for entry in manifest["samples"]
    ]
    splits = {k: DomainSplit.from_dict(v) for k, v in manifest["splits"].items()}
    return Dataset(root, task, samples, splits, manifest)
