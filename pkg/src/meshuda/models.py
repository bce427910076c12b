"""Parameter-conditioned mesh surrogates.

A :class:`SurrogateModel` couples a conditioning network, which maps the
simulation parameters to a small latent vector ``z``, with a node-level body
(PointNet-style global pooling or GraphSAGE-style mean message passing).
Forward passes run on a :class:`GraphBatch`, the disjoint union of several
meshes, so one set of matrix products covers a whole minibatch.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen.io import F8, HEADER, VERSION, _check_header, _header, dumps_json
from .datagen.solvers import MeshSample
from .exceptions import ConfigError, EmptyInputError, FormatError, ShapeError
from .tensor import Tensor

CKPT_MAGIC = b"MESHUDA-CKPT"
ARCHITECTURES = ("pointnet", "sage")
CONDITIONING = ("concat", "film")


def sinusoidal_features(u: np.ndarray, n_freqs: int = 8, base: float = 1e3) -> np.ndarray:
    """Map each column of ``u`` (already scaled to [0, 1]) to sin/cos pairs.

    Frequencies form the geometric ladder ``base ** (k / (n_freqs - 1))``.
    Output has ``2 * n_freqs`` columns per input column.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    k = np.arange(n_freqs)
    omega = base ** (k / max(n_freqs - 1, 1))
    arg = u[:, :, None] * omega[None, None, :]
    feats = np.concatenate([np.sin(arg), np.cos(arg)], axis=2)
    return feats.reshape(u.shape[0], -1)


def _scale(x, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    return (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)


@dataclass
class AdjacencyIndex:
    """Directed edges (both directions per mesh edge) plus one self-loop per node."""

    src: np.ndarray
    dst: np.ndarray
    n_nodes: int

    @classmethod
    def from_cells(cls, cells: np.ndarray, n_nodes: int) -> "AdjacencyIndex":
        cells = np.asarray(cells, dtype=np.int64)
        k = cells.shape[1] if cells.size else 2
        if cells.size:
            pairs = np.concatenate([cells[:, [a, (a + 1) % k]] for a in range(k if k > 2 else 1)])
            pairs = np.unique(np.sort(pairs, axis=1), axis=0)
            pairs = pairs[pairs[:, 0] != pairs[:, 1]]
        else:
            pairs = np.zeros((0, 2), dtype=np.int64)
        loops = np.arange(n_nodes)
        src = np.concatenate([pairs[:, 0], pairs[:, 1], loops])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0], loops])
        return cls(src.astype(np.int64), dst.astype(np.int64), n_nodes)

    @classmethod
    def self_loops(cls, n_nodes: int) -> "AdjacencyIndex":
        loops = np.arange(n_nodes, dtype=np.int64)
        return cls(loops, loops.copy(), n_nodes)

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)


@dataclass
class GraphBatch:
    """Disjoint union of meshes ready for a forward pass."""

    node_features: np.ndarray
    graph_ids: np.ndarray
    params: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    offsets: np.ndarray

    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_graphs(self) -> int:
        return self.params.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.node_features.shape[0]

    def _cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    @property
    def node_graph(self) -> T.RowIndex:
        """Gathers per-graph rows onto nodes."""
        return self._cached("node_graph", lambda: T.RowIndex(self.graph_ids, self.n_graphs))

    @property
    def graph_segments(self) -> T.Segments:
        return self._cached("graph_segments", lambda: T.Segments(self.graph_ids, self.n_graphs))

    @property
    def edge_source(self) -> T.RowIndex:
        return self._cached("edge_source", lambda: T.RowIndex(self.src, self.n_nodes))

    @property
    def edge_target(self) -> T.Segments:
        return self._cached("edge_target", lambda: T.Segments(self.dst, self.n_nodes))

    @property
    def neighbor_mean(self):
        """``(M, M^T)`` with ``M @ h`` equal to the mean over each node's in-edges."""
        def build():
            avg, _ = self.edge_target.mean_matrix
            gather = T._selection_matrix(self.edge_source.index, self.n_nodes)
            m = (avg @ gather).tocsr()
            return m, m.T.tocsr()
        return self._cached("neighbor_mean", build)

    def split(self, values: np.ndarray) -> list:
        return np.split(values, self.offsets[1:-1])


@dataclass
class ModelConfig:
    architecture: str = "sage"
    conditioning: str = "film"
    n_params: int = 4
    coord_dim: int = 2
    n_fields: int = 3
    latent_dim: int = 8
    n_freqs: int = 8
    freq_base: float = 1e3
    cond_hidden: tuple = (64,)
    width: int | None = None
    n_layers: int = 4
    param_bounds: tuple = ((0.0,) * 4, (1.0,) * 4)
    coord_bounds: tuple = (0.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}")
        if self.conditioning not in CONDITIONING:
            raise ConfigError(f"conditioning must be one of {CONDITIONING}")
        if self.width is None:
            self.width = 32 if self.architecture == "pointnet" else 64
        self.cond_hidden = tuple(self.cond_hidden)
        self.param_bounds = (tuple(self.param_bounds[0]), tuple(self.param_bounds[1]))
        self.coord_bounds = tuple(self.coord_bounds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cond_hidden"] = list(self.cond_hidden)
        d["param_bounds"] = [list(b) for b in self.param_bounds]
        d["coord_bounds"] = list(self.coord_bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ParamStore:
    """Ordered, named collection of trainable leaf tensors."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.tensors: dict[str, Tensor] = {}

    def linear(self, name: str, fan_in: int, fan_out: int) -> None:
        bound = np.sqrt(1.0 / fan_in)
        self.tensors[f"{name}.w"] = T.parameter(self.rng.uniform(-bound, bound, (fan_in, fan_out)), f"{name}.w")
        self.tensors[f"{name}.b"] = T.parameter(self.rng.uniform(-bound, bound, (fan_out,)), f"{name}.b")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return list(self.tensors)

    def values(self) -> list:
        return list(self.tensors.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self.tensors.values()])

    def load_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != sum(t.size for t in self.tensors.values()):
            raise ShapeError("flat parameter vector has the wrong length")
        off = 0
        for name, t in list(self.tensors.items()):
            n = t.size
            self.tensors[name] = T.parameter(flat[off:off + n].reshape(t.shape), name)
            off += n


def dense(x, store: ParamStore, name: str) -> Tensor:
    return T.add(T.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def mlp(x, store: ParamStore, names, final_activation: bool = False) -> Tensor:
    for i, name in enumerate(names):
        x = dense(x, store, name)
        if i < len(names) - 1 or final_activation:
            x = T.gelu(x)
    return x


def film_modulate(h, z, store: ParamStore, name: str, rows=None) -> Tensor:
    """Feature-wise affine modulation ``gamma(z) * h + beta(z)``.

    ``z`` is either a single latent row broadcast over all nodes, or one row
    per graph with ``rows`` giving each node's graph.
    """
    gamma = dense(z, store, f"{name}.gamma")
    beta = dense(z, store, f"{name}.beta")
    if rows is not None:
        gamma = T.take_rows(gamma, rows)
        beta = T.take_rows(beta, rows)
    return T.add(T.mul(gamma, h), beta)


class SurrogateModel:
    """Conditioned field predictor ``f(x) = g(x, phi(params))``."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.store = ParamStore(np.random.default_rng(config.seed))
        self._build()

    # -- construction -----------------------------------------------------
    def _build(self) -> None:
        c, s = self.config, self.store
        enc_p = 2 * c.n_freqs * c.n_params
        dims = [enc_p, *c.cond_hidden, c.latent_dim]
        self.cond_layers = []
        for i in range(len(dims) - 1):
            s.linear(f"cond.{i}", dims[i], dims[i + 1])
            self.cond_layers.append(f"cond.{i}")

        enc_x = 2 * c.n_freqs * c.coord_dim
        w = c.width
        s.linear("enc.0", enc_x, w)
        s.linear("enc.1", w, w)
        if c.architecture == "pointnet":
            dec_in = 2 * w + (c.latent_dim if c.conditioning == "concat" else 0)
            if c.conditioning == "film":
                self._film(s, "film.dec", 2 * w)
        else:
            extra = c.latent_dim if c.conditioning == "concat" else 0
            for layer in range(c.n_layers):
                if c.conditioning == "film":
                    self._film(s, f"film.{layer}", w)
                s.linear(f"mp.{layer}", 2 * w + extra, w)
            dec_in = w
        s.linear("dec.0", dec_in, w)
        s.linear("dec.1", w, c.n_fields)

    def _film(self, s: ParamStore, name: str, width: int) -> None:
        s.linear(f"{name}.gamma", self.config.latent_dim, width)
        s.linear(f"{name}.beta", self.config.latent_dim, width)
        # start near the identity modulation
        gb = s[f"{name}.gamma.b"].data
        s.tensors[f"{name}.gamma.b"] = T.parameter(gb + 1.0, f"{name}.gamma.b")

    def set_film_identity(self) -> None:
        """Force every FiLM layer to gamma = 1, beta = 0."""
        for name in self.store.names():
            if name.startswith("film."):
                t = self.store[name]
                value = np.ones(t.shape) if name.endswith("gamma.b") else np.zeros(t.shape)
                self.store.tensors[name] = T.parameter(value, name)

    # -- parameters --------------------------------------------------------
    def parameters(self) -> list:
        return self.store.values()

    def named_parameters(self) -> list:
        return list(self.store.tensors.items())

    def conditioner_parameters(self) -> list:
        return [t for n, t in self.store.tensors.items() if n.startswith("cond.")]

    def get_flat(self) -> np.ndarray:
        return self.store.flat()

    def set_flat(self, flat) -> None:
        self.store.load_flat(flat)

    def copy(self) -> "SurrogateModel":
        other = SurrogateModel.__new__(SurrogateModel)
        other.config = self.config
        other.cond_layers = list(self.cond_layers)
        other.store = ParamStore(np.random.default_rng(0))
        other.store.tensors = dict(self.store.tensors)
        return other

    # -- inputs ------------------------------------------------------------
    def encode_params(self, params) -> np.ndarray:
        lo, hi = self.config.param_bounds
        return sinusoidal_features(_scale(np.atleast_2d(params), lo, hi), self.config.n_freqs, self.config.freq_base)

    def encode_coords(self, coords) -> np.ndarray:
        lo, hi = self.config.coord_bounds
        return sinusoidal_features(_scale(coords, lo, hi), self.config.n_freqs, self.config.freq_base)

    def prepare(self, sample: MeshSample) -> dict:
        """Per-sample cache of encoded coordinates and adjacency."""
        if sample.n_nodes == 0:
            raise EmptyInputError("sample has no nodes")
        if sample.params.shape[0] != self.config.n_params:
            raise ShapeError(f"expected {self.config.n_params} parameters, got {sample.params.shape[0]}")
        adj = AdjacencyIndex.from_cells(sample.cells, sample.n_nodes)
        return {"x": self.encode_coords(sample.coords), "params": np.asarray(sample.params, dtype=np.float64),
                "src": adj.src, "dst": adj.dst, "n": sample.n_nodes}

    def batch(self, samples, prepared=None) -> GraphBatch:
        items = prepared if prepared is not None else [self.prepare(s) for s in samples]
        if not items:
            raise EmptyInputError("empty batch")
        sizes = np.array([it["n"] for it in items])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        return GraphBatch(
            node_features=np.concatenate([it["x"] for it in items]),
            graph_ids=np.repeat(np.arange(len(items)), sizes),
            params=np.stack([it["params"] for it in items]),
            src=np.concatenate([it["src"] + o for it, o in zip(items, offsets[:-1])]),
            dst=np.concatenate([it["dst"] + o for it, o in zip(items, offsets[:-1])]),
            offsets=offsets,
        )

    # -- forward -----------------------------------------------------------
    def condition(self, params) -> Tensor:
        """Latent conditioning vectors, one row per parameter vector."""
        return mlp(Tensor(self.encode_params(params)), self.store, self.cond_layers)

    def forward(self, batch: GraphBatch, z: Tensor | None = None) -> Tensor:
        """Node predictions (total nodes x fields). ``z`` may be passed in to reuse it."""
        if batch.n_nodes == 0:
            raise EmptyInputError("batch has no nodes")
        if z is None:
            z = self.condition(batch.params)
        if self.config.architecture == "pointnet":
            return self._pointnet(batch, z)
        return self._sage(batch, z)

    def node_encoding(self, batch: GraphBatch) -> Tensor:
        return mlp(Tensor(batch.node_features), self.store, ["enc.0", "enc.1"], final_activation=True)

    def global_feature(self, batch: GraphBatch) -> Tensor:
        return T.segment_max(self.node_encoding(batch), batch.graph_segments)

    def _pointnet(self, batch: GraphBatch, z: Tensor) -> Tensor:
        h = self.node_encoding(batch)
        pooled = T.segment_max(h, batch.graph_segments)
        parts = [h, T.take_rows(pooled, batch.node_graph)]
        if self.config.conditioning == "concat":
            parts.append(T.take_rows(z, batch.node_graph))
            feats = T.concat(parts, axis=1)
        else:
            feats = film_modulate(T.concat(parts, axis=1), z, self.store, "film.dec", batch.node_graph)
        return mlp(feats, self.store, ["dec.0", "dec.1"])

    def _sage(self, batch: GraphBatch, z: Tensor) -> Tensor:
        h = self.node_encoding(batch)
        film = self.config.conditioning == "film"
        z_nodes = None if film else T.take_rows(z, batch.node_graph)
        for layer in range(self.config.n_layers):
            if film:
                h = film_modulate(h, z, self.store, f"film.{layer}", batch.node_graph)
            neigh = _neighbor_mean(h, batch)
            parts = [h, neigh]
            if self.config.conditioning == "concat":
                parts.append(z_nodes)
            h = T.gelu(dense(T.concat(parts, axis=1), self.store, f"mp.{layer}"))
        return mlp(h, self.store, ["dec.0", "dec.1"])

    def predict_sample(self, sample: MeshSample) -> np.ndarray:
        return self.forward(self.batch([sample])).data.copy()

    # -- checkpoints -------------------------------------------------------
    def save(self, path) -> None:
        save_checkpoint(path, self)

    @classmethod
    def load(cls, path) -> "SurrogateModel":
        return load_checkpoint(path)


def _neighbor_mean(h: Tensor, batch: GraphBatch) -> Tensor:
    # same values as segment_mean(take_rows(h, src), dst), in one sparse product
    m, m_t = batch.neighbor_mean
    return T.custom_op(h, np.asarray(m @ h.data), lambda g: np.asarray(m_t @ g), "neighbor_mean")


def encode_condition(model: SurrogateModel, params) -> Tensor:
    return model.condition(params)


def pointnet_forward(sample: MeshSample, model: SurrogateModel) -> Tensor:
    if model.config.architecture != "pointnet":
        raise ConfigError("model is not a pointnet surrogate")
    return model.forward(model.batch([sample]))


def sage_forward(sample: MeshSample, adjacency: AdjacencyIndex, model: SurrogateModel) -> Tensor:
    if model.config.architecture != "sage":
        raise ConfigError("model is not a sage surrogate")
    prepared = model.prepare(sample)
    prepared["src"], prepared["dst"] = adjacency.src, adjacency.dst
    return model.forward(model.batch([sample], [prepared]))


def checkpoint_bytes(model: SurrogateModel) -> bytes:
    flat = model.get_flat()
    return _header(CKPT_MAGIC) + struct.pack("<Q", flat.size) + np.ascontiguousarray(flat, dtype=F8).tobytes()


def checkpoint_sidecar(model: SurrogateModel, extra: dict | None = None) -> dict:
    layout, off = [], 0
    for name, t in model.named_parameters():
        layout.append({"name": name, "shape": list(t.shape), "offset": off})
        off += t.size
    d = {"format": "meshuda-checkpoint", "version": VERSION, "architecture": model.config.architecture,
         "config": model.config.to_dict(), "parameters": layout, "n_values": off}
    if extra:
        d.update(extra)
    return d


def save_checkpoint(path, model: SurrogateModel, extra: dict | None = None) -> None:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model))
    path.with_suffix(".json").write_text(dumps_json(checkpoint_sidecar(model, extra)), encoding="utf-8")


def read_checkpoint_values(path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    _check_header(buf, CKPT_MAGIC, path)
    off = HEADER.size
    if len(buf) < off + 8:
        raise FormatError(f"{path}: truncated value count", offset=len(buf))
    (count,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if len(buf) != off + 8 * count:
        raise FormatError(f"{path}: expected {off + 8 * count} bytes, found {len(buf)}", offset=min(len(buf), off + 8 * count))
    return np.frombuffer(buf, dtype=F8, count=count, offset=off).astype(np.float64)


def load_checkpoint(path) -> SurrogateModel:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    model = SurrogateModel(ModelConfig.from_dict(sidecar["config"]))
    values = read_checkpoint_values(path)
    if values.size != sidecar["n_values"]:
        raise FormatError(f"{path}: value count disagrees with sidecar", offset=HEADER.size)
    model.set_flat(values)
    return model
