"""Steady-state solvers that produce the synthetic corpora.

``solve_plate_heat`` is a P1 finite-element heat conduction solve on a notched
plate; ``solve_rod_bending`` is a finite-difference cantilever deflection.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ..exceptions import NumericError, SolverError
from .mesh import cut_notch, is_connected, lattice_mesh, signed_areas

PLATE_PARAMS = ("t_left", "t_right", "conductivity_ratio", "notch_size")
PLATE_FIELDS = ("temperature", "flux_x", "flux_y")
ROD_PARAMS = ("length", "thickness", "load", "modulus")
ROD_FIELDS = ("deflection", "stress")


@dataclass
class MeshSample:
    """One simulation instance on an unstructured mesh."""

    coords: np.ndarray
    cells: np.ndarray
    params: np.ndarray
    fields: np.ndarray
    sample_id: str
    param_names: tuple = field(default=())
    field_names: tuple = field(default=())

    @property
    def n_nodes(self) -> int:
        return self.coords.shape[0]

    def param(self, name: str) -> float:
        return float(self.params[self.param_names.index(name)])

    def field(self, name: str) -> np.ndarray:
        return self.fields[:, self.field_names.index(name)]


def _dirichlet_masks(coords):
    left = np.isclose(coords[:, 0], 0.0, atol=1e-12)
    right = np.isclose(coords[:, 0], 1.0, atol=1e-12)
    return left, right


def plate_conductivity(coords, cells, ratio):
    """Per-element conductivity: 1 left of x = 0.5, ``ratio`` to the right."""
    cx = coords[cells].mean(axis=1)[:, 0]
    return np.where(cx < 0.5, 1.0, ratio)


def element_gradients(coords, cells):
    """Gradients of the three P1 basis functions on every triangle, shape (C, 3, 2)."""
    p = coords[cells]
    area = signed_areas(coords, cells)
    # grad(lambda_k) = rot90(edge opposite k) / (2 area)
    e0 = p[:, 2] - p[:, 1]
    e1 = p[:, 0] - p[:, 2]
    e2 = p[:, 1] - p[:, 0]
    edges = np.stack([e0, e1, e2], axis=1)
    grads = np.stack([-edges[..., 1], edges[..., 0]], axis=-1) / (2.0 * area[:, None, None])
    return grads, area


def assemble_stiffness(coords, cells, conductivity):
    grads, area = element_gradients(coords, cells)
    local = np.einsum("cid,cjd->cij", grads, grads) * (conductivity * area)[:, None, None]
    rows = np.repeat(cells, 3, axis=1).reshape(-1)
    cols = np.tile(cells, (1, 3)).reshape(-1)
    n = len(coords)
    return sp.csr_matrix((local.reshape(-1), (rows, cols)), shape=(n, n))


def plate_system(coords, cells, params):
    """Reduced linear system ``A u = b`` for the free (non-Dirichlet) nodes.

    Returns ``(A, b, free, fixed, fixed_values)``.
    """
    t_left, t_right, ratio, _ = params
    k = plate_conductivity(coords, cells, ratio)
    K = assemble_stiffness(coords, cells, k)
    left, right = _dirichlet_masks(coords)
    fixed = left | right
    values = np.where(left, t_left, t_right)[fixed]
    free = ~fixed
    A = K[free][:, free].tocsc()
    b = -(K[free][:, fixed] @ values)
    return A, b, free, fixed, values


def plate_residual(sample: MeshSample) -> float:
    """Relative residual ``|A u - b|_inf / |b|_inf`` of a stored plate sample."""
    A, b, free, _, _ = plate_system(sample.coords, sample.cells, sample.params)
    u = sample.field("temperature")[free]
    return float(np.abs(A @ u - b).max() / max(np.abs(b).max(), np.finfo(float).tiny))


def solve_plate_heat(params, resolution: int = 24, seed: int = 0, sample_id: str = "plate") -> MeshSample:
    """Steady heat conduction on a jittered, notched unit plate.

    ``params`` is ``(t_left, t_right, conductivity_ratio, notch_size)`` or a
    mapping with those keys. Temperatures are fixed on the left and right
    edges; all other boundaries are insulated.
    """
    if isinstance(params, dict):
        params = [params[name] for name in PLATE_PARAMS]
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (4,) or not np.isfinite(params).all():
        raise NumericError(f"plate-heat needs 4 finite parameters, got {params}")
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    t_left, t_right, ratio, notch = params
    if ratio <= 0 or not 0.0 <= notch < 1.0:
        raise SolverError("conductivity ratio must be positive and notch size in [0, 1)", params.tolist())

    rng = np.random.default_rng(seed)
    coords, cells = lattice_mesh(resolution, rng)
    coords, cells = cut_notch(coords, cells, notch)
    if not is_connected(len(coords), cells):
        raise SolverError("notch disconnects the mesh", params.tolist())

    A, b, free, fixed, values = plate_system(coords, cells, params)
    if not (np.isfinite(A.data).all() and np.isfinite(b).all()):
        raise NumericError("non-finite entries in assembled system")
    try:
        u_free = spla.splu(A).solve(b)
    except RuntimeError as exc:
        raise SolverError(f"factorization failed: {exc}", params.tolist()) from exc

    temp = np.empty(len(coords))
    temp[free] = u_free
    temp[fixed] = values

    grads, area = element_gradients(coords, cells)
    k = plate_conductivity(coords, cells, ratio)
    grad_t = np.einsum("cid,ci->cd", grads, temp[cells])
    flux = -k[:, None] * grad_t
    # area-weighted average of element fluxes onto nodes
    weight = np.zeros(len(coords))
    node_flux = np.zeros((len(coords), 2))
    for a in range(3):
        np.add.at(weight, cells[:, a], area)
        np.add.at(node_flux, cells[:, a], flux * area[:, None])
    node_flux /= weight[:, None]

    fields = np.column_stack([temp, node_flux])
    if not np.isfinite(fields).all():
        raise NumericError("non-finite solution fields")
    return MeshSample(coords, cells, params, fields, sample_id, PLATE_PARAMS, PLATE_FIELDS)


def rod_system(params, n_nodes: int):
    """Finite-difference system for the clamped-free Euler-Bernoulli cantilever.

    Unknowns are nodal deflections. Row 0 clamps the deflection, row 1 is the
    curvature equation at the clamp with a mirrored ghost node (zero slope),
    rows 2.. are central curvature equations at nodes 1..N-2.
    """
    length, thickness, load, modulus = params
    x = np.linspace(0.0, length, n_nodes)
    h = x[1] - x[0]
    inertia = thickness ** 4 / 12.0
    moment = load * (length - x)
    curvature = moment / (modulus * inertia)
    rhs = np.zeros(n_nodes)
    A = sp.lil_matrix((n_nodes, n_nodes))
    A[0, 0] = 1.0
    A[1, 0] = -2.0 / h**2
    A[1, 1] = 2.0 / h**2
    rhs[1] = curvature[0]
    for i in range(1, n_nodes - 1):
        A[i + 1, i - 1] += 1.0 / h**2
        A[i + 1, i] += -2.0 / h**2
        A[i + 1, i + 1] += 1.0 / h**2
        rhs[i + 1] = curvature[i]
    return x, A.tocsc(), rhs, moment, inertia


def solve_rod_bending(params, n_nodes: int = 200, sample_id: str = "rod") -> MeshSample:
    """Tip-loaded cantilever: deflection and extreme-fibre bending stress per node."""
    if isinstance(params, dict):
        params = [params[name] for name in ROD_PARAMS]
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (4,) or not np.isfinite(params).all():
        raise NumericError(f"rod bending needs 4 finite parameters, got {params}")
    length, thickness, load, modulus = params
    if length <= 0 or thickness <= 0 or modulus <= 0 or load < 0:
        raise SolverError("rod parameters must be positive (load nonnegative)", params.tolist())
    if n_nodes < 3:
        raise ValueError("need at least 3 nodes")
    x, A, rhs, moment, inertia = rod_system(params, n_nodes)
    deflection = spla.spsolve(A, rhs)
    stress = moment * (thickness / 2.0) / inertia
    cells = np.column_stack([np.arange(n_nodes - 1), np.arange(1, n_nodes)]).astype(np.int64)
    fields = np.column_stack([deflection, stress])
    if not np.isfinite(fields).all():
        raise NumericError("non-finite rod solution")
    return MeshSample(x[:, None], cells, params, fields, sample_id, ROD_PARAMS, ROD_FIELDS)


def rod_residual(sample: MeshSample) -> float:
    _, A, rhs, _, _ = rod_system(sample.params, sample.n_nodes)
    u = sample.field("deflection")
    scale = max(np.abs(rhs).max(), np.finfo(float).tiny)
    return float(np.abs(A @ u - rhs).max() / scale)
