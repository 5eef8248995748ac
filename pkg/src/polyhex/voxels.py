"""Integer-lattice helpers shared by the synthetic generator and the polycube stage.

A voxel set is an ``(n, 3)`` integer array of unit-cell coordinates; cell
``(i, j, k)`` spans ``[i, i+1] x [j, j+1] x [k, k+1]`` in grid units.
Boundary faces are voxel faces whose neighbor across the face is empty.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

# Axis directions in the fixed label order +X, -X, +Y, -Y, +Z, -Z.
DIRECTIONS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]],
                      dtype=np.int64)
LABEL_NAMES = ("+X", "-X", "+Y", "-Y", "+Z", "-Z")


def as_voxels(cells) -> np.ndarray:
    """Sorted, deduplicated ``(n, 3)`` int64 voxel array."""
    v = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
    if len(v) == 0:
        return v
    return np.unique(v, axis=0)


def dense(voxels: np.ndarray, pad: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Boolean occupancy grid with ``pad`` empty layers, and its lattice origin."""
    if len(voxels) == 0:
        return np.zeros((1, 1, 1), bool), np.zeros(3, np.int64)
    lo = voxels.min(axis=0) - pad
    hi = voxels.max(axis=0) + pad
    grid = np.zeros(tuple(hi - lo + 1), bool)
    k = voxels - lo
    grid[k[:, 0], k[:, 1], k[:, 2]] = True
    return grid, lo


def boundary_faces(voxels: np.ndarray) -> np.ndarray:
    """``(F, 4)`` rows ``(i, j, k, dir)``: voxel plus index into ``DIRECTIONS``."""
    if len(voxels) == 0:
        return np.zeros((0, 4), np.int64)
    grid, lo = dense(voxels)
    k = voxels - lo
    out = []
    for d, step in enumerate(DIRECTIONS):
        nb = k + step
        empty = ~grid[nb[:, 0], nb[:, 1], nb[:, 2]]
        sel = voxels[empty]
        out.append(np.column_stack([sel, np.full(len(sel), d, np.int64)]))
    faces = np.concatenate(out)
    return faces[np.lexsort((faces[:, 3], faces[:, 2], faces[:, 1], faces[:, 0]))]


def face_corners(faces: np.ndarray) -> np.ndarray:
    """Lattice corners ``(F, 4, 3)`` of each boundary face, counter-clockwise seen from outside."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 4)
    out = np.zeros((len(faces), 4, 3), np.int64)
    for d in range(6):
        m = faces[:, 3] == d
        if not m.any():
            continue
        a, sign = d // 2, 1 if d % 2 == 0 else -1
        b, c = (a + 1) % 3, (a + 2) % 3
        base = faces[m, :3].copy()
        base[:, a] += 1 if sign > 0 else 0
        # e_b x e_c = e_a, so this order faces +a
        offs = [(0, 0), (1, 0), (1, 1), (0, 1)]
        if sign < 0:
            offs = offs[::-1]
        for q, (ob, oc) in enumerate(offs):
            p = base.copy()
            p[:, b] += ob
            p[:, c] += oc
            out[m, q] = p
    return out


def quad_surface(faces: np.ndarray, scale: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Deduplicated lattice vertices and ``(F, 4)`` quads of the boundary surface.

    With ``scale > 1`` every face is split into ``scale x scale`` sub-quads and
    vertices are returned in units of ``1/scale``, still as integers.
    """
    corners = face_corners(faces) * scale
    if scale > 1:
        p0, p1, p3 = corners[:, 0], corners[:, 1], corners[:, 3]
        du = (p1 - p0) // scale
        dv = (p3 - p0) // scale
        u, v = np.meshgrid(np.arange(scale), np.arange(scale), indexing="ij")
        u, v = u.ravel(), v.ravel()
        sub = []
        for ou, ov in ((0, 0), (1, 0), (1, 1), (0, 1)):
            sub.append(p0[:, None, :] + (u + ou)[None, :, None] * du[:, None, :]
                       + (v + ov)[None, :, None] * dv[:, None, :])
        corners = np.stack(sub, axis=2).reshape(-1, 4, 3)
    if len(corners) == 0:
        return np.zeros((0, 3), np.int64), np.zeros((0, 4), np.int64)
    verts, inv = np.unique(corners.reshape(-1, 3), axis=0, return_inverse=True)
    return verts, inv.reshape(-1, 4)


def quad_edges(quads: np.ndarray) -> np.ndarray:
    """All quad edges as sorted vertex pairs, one row per (quad, side)."""
    e = np.stack([quads, np.roll(quads, -1, axis=1)], axis=-1).reshape(-1, 2)
    return np.sort(e, axis=1)


def edge_counts(quads: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges and how many quads use each."""
    if len(quads) == 0:
        return np.zeros((0, 2), np.int64), np.zeros(0, np.int64)
    return np.unique(quad_edges(quads), axis=0, return_counts=True)


def euler_characteristic(verts: np.ndarray, quads: np.ndarray) -> int:
    edges, _ = edge_counts(quads)
    used = np.unique(quads) if len(quads) else np.zeros(0, np.int64)
    return int(len(used) - len(edges) + len(quads))


def surface_components(n_verts: int, quads: np.ndarray) -> tuple[int, np.ndarray]:
    """Connected components of quads linked through shared edges; label per quad."""
    if len(quads) == 0:
        return 0, np.zeros(0, np.int64)
    e = quad_edges(quads)
    owner = np.repeat(np.arange(len(quads)), 4)
    _, eid = np.unique(e, axis=0, return_inverse=True)
    eid = eid.ravel()
    # bipartite quad/edge graph
    nq = len(quads)
    g = coo_matrix((np.ones(len(eid)), (owner, nq + eid)), shape=(nq + eid.max() + 1,) * 2)
    n, lab = connected_components(g, directed=False)
    lab = lab[:nq]
    _, lab = np.unique(lab, return_inverse=True)
    return int(lab.max()) + 1, lab


def voxel_components(voxels: np.ndarray) -> tuple[int, np.ndarray]:
    """Face-connected components of a voxel set."""
    if len(voxels) == 0:
        return 0, np.zeros(0, np.int64)
    grid, lo = dense(voxels)
    ids = -np.ones(grid.shape, np.int64)
    k = voxels - lo
    ids[k[:, 0], k[:, 1], k[:, 2]] = np.arange(len(voxels))
    rows, cols = [], []
    for step in DIRECTIONS[::2]:
        nb = k + step
        j = ids[nb[:, 0], nb[:, 1], nb[:, 2]]
        m = j >= 0
        rows.append(np.nonzero(m)[0])
        cols.append(j[m])
    r, c = np.concatenate(rows), np.concatenate(cols)
    g = coo_matrix((np.ones(len(r)), (r, c)), shape=(len(voxels),) * 2)
    return connected_components(g, directed=False)
