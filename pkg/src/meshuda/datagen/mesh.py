"""Jittered lattice triangulations of the unit square with a slot notch."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

NOTCH_WIDTH = 0.15
JITTER = 0.2


def _row_positions(n_cols: int, odd: bool) -> np.ndarray:
    if not odd:
        return np.arange(n_cols + 1) / n_cols
    mids = (np.arange(n_cols) + 0.5) / n_cols
    return np.concatenate([[0.0], mids, [1.0]])


def _stitch(lower, upper, lo_ids, up_ids) -> list:
    """Triangulate the strip between two sorted rows, advancing the side whose
    next segment has the smaller midpoint."""
    tris = []
    i = j = 0
    while i < len(lower) - 1 or j < len(upper) - 1:
        advance_lower = j == len(upper) - 1 or (
            i < len(lower) - 1
            and lower[i] + lower[i + 1] <= upper[j] + upper[j + 1]
        )
        if advance_lower:
            tris.append((lo_ids[i], lo_ids[i + 1], up_ids[j]))
            i += 1
        else:
            tris.append((lo_ids[i], up_ids[j + 1], up_ids[j]))
            j += 1
    return tris


def lattice_mesh(resolution: int, rng: np.random.Generator, jitter: float = JITTER):
    """Near-equilateral triangulation of [0, 1]^2 with ``resolution`` row intervals.

    Nodes are displaced by uniform noise of amplitude ``jitter`` times the row
    spacing. Boundary nodes only slide along their edge and corners stay put.
    Returns ``(coords, cells)`` with counter-clockwise triangles.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    n_cols = max(1, int(round(resolution * np.sqrt(3.0) / 2.0)))
    rows = []
    ids = []
    offset = 0
    for j in range(resolution + 1):
        xs = _row_positions(n_cols, odd=bool(j % 2))
        rows.append(xs)
        ids.append(np.arange(offset, offset + len(xs)))
        offset += len(xs)
    coords = np.concatenate(
        [np.column_stack([xs, np.full(len(xs), j / resolution)]) for j, xs in enumerate(rows)]
    )
    cells = []
    for j in range(resolution):
        cells.extend(_stitch(rows[j], rows[j + 1], ids[j], ids[j + 1]))
    cells = np.asarray(cells, dtype=np.int64)

    h = 1.0 / resolution
    noise = rng.uniform(-jitter * h, jitter * h, size=coords.shape)
    on_lr = np.isclose(coords[:, 0], 0.0) | np.isclose(coords[:, 0], 1.0)
    on_tb = np.isclose(coords[:, 1], 0.0) | np.isclose(coords[:, 1], 1.0)
    noise[on_lr, 0] = 0.0
    noise[on_tb, 1] = 0.0
    coords = coords + noise

    area = signed_areas(coords, cells)
    flip = area < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    return coords, cells


def signed_areas(coords: np.ndarray, cells: np.ndarray) -> np.ndarray:
    p0, p1, p2 = coords[cells[:, 0]], coords[cells[:, 1]], coords[cells[:, 2]]
    d1, d2 = p1 - p0, p2 - p0
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def cut_notch(coords: np.ndarray, cells: np.ndarray, depth: float, width: float = NOTCH_WIDTH):
    """Remove the triangles whose centroid falls in a slot cut down from the top edge."""
    centroid = coords[cells].mean(axis=1)
    inside = (
        (np.abs(centroid[:, 0] - 0.5) < width / 2.0)
        & (centroid[:, 1] > 1.0 - depth)
    )
    kept = cells[~inside]
    used = np.unique(kept)
    remap = np.full(len(coords), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return coords[used], remap[kept]


def mesh_edges(cells: np.ndarray) -> np.ndarray:
    """Unique undirected edges ``(i, j)`` with ``i < j``."""
    k = cells.shape[1]
    if k == 2:
        pairs = cells
    else:
        pairs = np.concatenate([cells[:, [a, (a + 1) % k]] for a in range(k)])
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def is_connected(n_nodes: int, cells: np.ndarray) -> bool:
    edges = mesh_edges(cells)
    graph = sp.coo_matrix(
        (np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n_nodes, n_nodes)
    )
    n_comp, _ = connected_components(graph, directed=False)
    return n_comp == 1
