import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meshuda import tensor as T
from meshuda.datagen.mesh import lattice_mesh
from meshuda.datagen.solvers import MeshSample
from meshuda.exceptions import ConfigError, EmptyInputError, FormatError, ShapeError
from meshuda.models import (
    AdjacencyIndex,
    ModelConfig,
    SurrogateModel,
    checkpoint_bytes,
    load_checkpoint,
    pointnet_forward,
    sage_forward,
    save_checkpoint,
    sinusoidal_features,
)


def tiny_config(arch="sage", cond="film", seed=0):
    return ModelConfig(architecture=arch, conditioning=cond, latent_dim=3, n_freqs=2, cond_hidden=(5,),
                       width=4, n_layers=2, param_bounds=((0.0,) * 4, (1.0,) * 4), seed=seed)


def tiny_sample(seed=0, res=3):
    rng = np.random.default_rng(seed)
    coords, cells = lattice_mesh(res, rng)
    return MeshSample(coords, cells, rng.uniform(size=4), rng.normal(size=(len(coords), 3)), f"s{seed}")


def test_sinusoidal_layout():
    f = sinusoidal_features(np.array([[0.5, 0.25]]), n_freqs=3, base=100.0)
    assert f.shape == (1, 12)
    omega = np.array([1.0, 10.0, 100.0])
    assert np.allclose(f[0, :6], np.concatenate([np.sin(0.5 * omega), np.cos(0.5 * omega)]))


def test_adjacency_from_triangles_has_both_directions_and_self_loops():
    adj = AdjacencyIndex.from_cells(np.array([[0, 1, 2]]), 3)
    pairs = set(zip(adj.src.tolist(), adj.dst.tolist()))
    assert pairs == {(i, j) for i in range(3) for j in range(3)}
    assert adj.in_degree().tolist() == [3, 3, 3]
    line = AdjacencyIndex.from_cells(np.array([[0, 1], [1, 2]]), 3)
    assert line.in_degree().tolist() == [2, 3, 2]


def test_sage_neighbour_mean_matches_loop():
    model = SurrogateModel(tiny_config())
    s = tiny_sample()
    batch = model.batch([s])
    h = np.random.default_rng(1).normal(size=(s.n_nodes, 4))
    m, _ = batch.neighbor_mean
    adj = AdjacencyIndex.from_cells(s.cells, s.n_nodes)
    for i in range(s.n_nodes):
        assert np.allclose((m @ h)[i], h[adj.src[adj.dst == i]].mean(axis=0))


@pytest.mark.parametrize("arch", ["pointnet", "sage"])
@pytest.mark.parametrize("cond", ["film", "concat"])
def test_batch_equals_individual_forwards(arch, cond):
    model = SurrogateModel(tiny_config(arch, cond))
    samples = [tiny_sample(i, 2 + i) for i in range(3)]
    joint = model.batch(samples)
    parts = joint.split(model.forward(joint).data)
    for s, p in zip(samples, parts):
        assert np.allclose(p, model.predict_sample(s), atol=1e-12)


@settings(max_examples=10)
@given(seed=st.integers(0, 1000))
def test_pointnet_is_permutation_equivariant(seed):
    model = SurrogateModel(tiny_config("pointnet"))
    s = tiny_sample(seed)
    perm = np.random.default_rng(seed).permutation(s.n_nodes)
    inv = np.argsort(perm)
    shuffled = MeshSample(s.coords[perm], inv[s.cells], s.params, s.fields[perm], "p")
    assert np.allclose(model.predict_sample(shuffled), model.predict_sample(s)[perm], atol=1e-12)
    glob_a = model.global_feature(model.batch([s])).data
    glob_b = model.global_feature(model.batch([shuffled])).data
    assert np.array_equal(glob_a, glob_b)


def test_sage_is_permutation_equivariant():
    model = SurrogateModel(tiny_config("sage"))
    s = tiny_sample(4)
    perm = np.random.default_rng(4).permutation(s.n_nodes)
    inv = np.argsort(perm)
    shuffled = MeshSample(s.coords[perm], inv[s.cells], s.params, s.fields[perm], "p")
    assert np.allclose(model.predict_sample(shuffled), model.predict_sample(s)[perm], atol=1e-12)


def test_condition_depends_only_on_params():
    model = SurrogateModel(tiny_config())
    z1 = model.condition(np.array([0.1, 0.2, 0.3, 0.4])).data
    z2 = model.condition(np.array([[0.1, 0.2, 0.3, 0.4], [0.9, 0.1, 0.5, 0.5]])).data
    assert z1.shape == (1, 3)
    assert np.allclose(z1[0], z2[0])
    assert not np.allclose(z2[0], z2[1])


def test_film_identity_removes_parameter_dependence():
    model = SurrogateModel(tiny_config("pointnet"))
    model.set_film_identity()
    a = tiny_sample(0)
    b = MeshSample(a.coords, a.cells, 1 - a.params, a.fields, "b")
    assert np.allclose(model.predict_sample(a), model.predict_sample(b))


def test_film_starts_near_identity_gain():
    model = SurrogateModel(ModelConfig(seed=3))
    gain = model.store["film.0.gamma.b"].data
    assert np.all(np.abs(gain - 1.0) <= np.sqrt(1 / 8) + 1e-12)


def test_architecture_specific_entry_points():
    s = tiny_sample()
    pn = SurrogateModel(tiny_config("pointnet"))
    sg = SurrogateModel(tiny_config("sage"))
    assert pointnet_forward(s, pn).shape == (s.n_nodes, 3)
    adj = AdjacencyIndex.from_cells(s.cells, s.n_nodes)
    assert np.allclose(sage_forward(s, adj, sg).data, sg.predict_sample(s))
    with pytest.raises(ConfigError):
        pointnet_forward(s, sg)
    # self loops only: the neighbour mean collapses to the node itself
    alone = sage_forward(s, AdjacencyIndex.self_loops(s.n_nodes), sg).data
    assert not np.allclose(alone, sg.predict_sample(s))


def test_input_validation():
    model = SurrogateModel(tiny_config())
    s = tiny_sample()
    with pytest.raises(ShapeError):
        model.prepare(MeshSample(s.coords, s.cells, np.ones(3), s.fields, "bad"))
    with pytest.raises(EmptyInputError):
        model.batch([])
    with pytest.raises(ConfigError):
        ModelConfig(architecture="transformer")
    with pytest.raises(ShapeError):
        model.set_flat(np.zeros(3))


def test_default_widths():
    assert ModelConfig(architecture="pointnet").width == 32
    assert ModelConfig(architecture="sage").width == 64


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    model = SurrogateModel(tiny_config("sage", seed=9))
    save_checkpoint(tmp_path / "a.bin", model, {"note": "x"})
    back = load_checkpoint(tmp_path / "a.bin")
    save_checkpoint(tmp_path / "b.bin", back, {"note": "x"})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    s = tiny_sample()
    assert np.array_equal(back.predict_sample(s), model.predict_sample(s))


def test_checkpoint_corruption_detected(tmp_path):
    model = SurrogateModel(tiny_config())
    save_checkpoint(tmp_path / "c.bin", model)
    buf = checkpoint_bytes(model)
    (tmp_path / "c.bin").write_bytes(buf[:-8])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "c.bin")


def test_forward_without_tape_records_nothing():
    model = SurrogateModel(tiny_config())
    out = model.forward(model.batch([tiny_sample()]))
    assert not out.requires_grad
    with T.Tape() as tape:
        model.forward(model.batch([tiny_sample()]))
    assert len(tape) > 0
