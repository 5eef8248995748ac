"""Hex mesh extraction, surface pullback, smoothing, pillowing and quality.

Cells use the VTK hexahedron corner order everywhere: bottom quad
counter-clockwise seen from above, then the top quad in the same order::

    7-----6
    |\\    |\\
    | 4-----5
    3-|---2 |
     \\|    \\|
      0-----1

Lattice coordinates of hex vertices are integers in units of ``h / s``
where ``h`` is the voxel unit and ``s`` the subdivision.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from . import voxels as vx
from .errors import DataError, ValidityError
from .geomio import TriMesh, closest_point_on_mesh, feature_edges
from .polycube import VoxelModel

# unit-cube corner offsets in VTK order
CORNERS = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
                    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]], dtype=np.int64)
# the three edge neighbors of each corner, ordered as a right-handed frame
CORNER_FRAMES = np.array([[1, 3, 4], [2, 0, 5], [3, 1, 6], [0, 2, 7],
                          [7, 5, 0], [4, 6, 1], [5, 7, 2], [6, 4, 3]], dtype=np.int64)
# outward-oriented faces
FACES = np.array([[0, 3, 2, 1], [4, 5, 6, 7], [0, 1, 5, 4],
                  [1, 2, 6, 5], [2, 3, 7, 6], [3, 0, 4, 7]], dtype=np.int64)
EDGES = np.array([[0, 1], [1, 2], [2, 3], [3, 0], [4, 5], [5, 6], [6, 7], [7, 4],
                  [0, 4], [1, 5], [2, 6], [3, 7]], dtype=np.int64)


class PillowingError(ValidityError):
    """Inset layer would invert cells; ``original`` holds the untouched mesh."""

    def __init__(self, message, original):
        super().__init__(message)
        self.original = original


@dataclass
class HexMesh:
    vertices: np.ndarray
    cells: np.ndarray
    lattice: np.ndarray | None = None
    unit: float = 1.0
    face_id: np.ndarray | None = None
    bary: np.ndarray | None = None
    subdiv: int = 1
    boundary: np.ndarray = field(init=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.cells = np.ascontiguousarray(self.cells, dtype=np.int64).reshape(-1, 8)
        n = len(self.vertices)
        if len(self.cells):
            if self.cells.min() < 0 or self.cells.max() >= n:
                raise DataError("cell vertex index out of range")
            s = np.sort(self.cells, axis=1)
            if np.any(s[:, 1:] == s[:, :-1]):
                raise DataError("cell repeats a vertex")
        if self.face_id is None:
            self.face_id = np.full(n, -1, np.int64)
        if self.bary is None:
            self.bary = np.zeros((n, 3))
        self.boundary = np.zeros(n, bool)
        q = self.boundary_quads()
        self.boundary[q.ravel()] = True

    def __len__(self):
        return len(self.cells)

    def copy(self) -> "HexMesh":
        return HexMesh(self.vertices.copy(), self.cells.copy(),
                       None if self.lattice is None else self.lattice.copy(), self.unit,
                       self.face_id.copy(), self.bary.copy(), self.subdiv)

    @property
    def voxel_unit(self) -> float:
        return self.unit * self.subdiv

    def all_faces(self) -> np.ndarray:
        """``(6C, 4)`` outward faces, cell-major."""
        return self.cells[:, FACES].reshape(-1, 4)

    def _face_keys(self):
        f = self.all_faces()
        return f, np.sort(f, axis=1)

    def boundary_quads(self) -> np.ndarray:
        """Faces used by exactly one cell, outward oriented."""
        if len(self.cells) == 0:
            return np.zeros((0, 4), np.int64)
        f, key = self._face_keys()
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return f[counts[inv.ravel()] == 1]

    def edges(self) -> np.ndarray:
        if len(self.cells) == 0:
            return np.zeros((0, 2), np.int64)
        e = np.sort(self.cells[:, EDGES].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    def conformity(self) -> dict:
        """Face-sharing census: counts of faces used once, twice (opposite), or otherwise."""
        if len(self.cells) == 0:
            return {"boundary": 0, "interior": 0, "bad": 0}
        f, key = self._face_keys()
        _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.ravel()
        bad = int((counts > 2).sum())
        interior = 0
        order = np.argsort(inv, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        for g in np.nonzero(counts == 2)[0]:
            a, b = f[order[starts[g]]], f[order[starts[g] + 1]]
            # opposite orientation: b is a reversed cyclic rotation of a
            r = a[::-1]
            k = int(np.nonzero(r == b[0])[0][0])
            if np.array_equal(np.roll(r, -k), b):
                interior += 1
            else:
                bad += 1
        return {"boundary": int((counts == 1).sum()), "interior": interior, "bad": bad}


# ---------------------------------------------------------------- extraction

def extract_hexes(vm: VoxelModel, s: int = 1) -> HexMesh:
    """Split every voxel into ``s^3`` hexes; vertices deduplicated by lattice key."""
    if s < 1:
        raise ValueError(f"subdivision must be >= 1, got {s}")
    if len(vm.voxels) == 0:
        return HexMesh(np.zeros((0, 3)), np.zeros((0, 8)), np.zeros((0, 3), np.int64), vm.h / s,
                       subdiv=s)
    sub = np.stack(np.meshgrid(*[np.arange(s)] * 3, indexing="ij"), -1).reshape(-1, 3)
    fine = (vm.voxels[:, None, :] * s + sub[None]).reshape(-1, 3)
    corners = fine[:, None, :] + CORNERS[None]
    lat, inv = np.unique(corners.reshape(-1, 3), axis=0, return_inverse=True)
    cells = inv.reshape(-1, 8)
    return HexMesh(vm.origin + vm.h * lat / s, cells, lat, vm.h / s, subdiv=s)


# ---------------------------------------------------------------- quality

@dataclass
class QualityReport:
    cell_jacobian: np.ndarray
    j_min: float | None
    j_avg: float | None
    inverted: int

    def as_dict(self) -> dict:
        return {"cells": int(len(self.cell_jacobian)), "j_min": self.j_min,
                "j_avg": self.j_avg, "inverted": self.inverted}


def corner_jacobians(vertices: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """``(C, 8)`` determinants of the normalized edge frames at each corner.

    Edges shorter than 1e-12 of the cell's longest edge count as zero
    length and give a corner value of 0.
    """
    v = np.asarray(vertices, dtype=np.float64)[cells]
    e = v[:, CORNER_FRAMES, :] - v[:, :, None, :]
    ln = np.linalg.norm(e, axis=-1)
    scale = ln.reshape(len(cells), -1).max(axis=1)[:, None, None]
    zero = ln <= 1e-12 * scale
    with np.errstate(invalid="ignore", divide="ignore"):
        u = e / np.where(zero, 1.0, ln)[..., None]
    det = np.einsum("cki,cki->ck", u[:, :, 0], np.cross(u[:, :, 1], u[:, :, 2]))
    det[zero.any(axis=-1)] = 0.0
    return np.clip(det, -1.0, 1.0)


def quality(hm: HexMesh) -> QualityReport:
    if len(hm.cells) == 0:
        return QualityReport(np.zeros(0), None, None, 0)
    cj = corner_jacobians(hm.vertices, hm.cells).min(axis=1)
    return QualityReport(cj, float(cj.min()), float(cj.mean()), int((cj <= 0).sum()))


# ---------------------------------------------------------------- surface pullback

def _surface_graph(hm: HexMesh):
    """Boundary vertices, their edges along boundary quads, and crease edges.

    A crease edge separates boundary quads of different lattice directions.
    """
    quads = hm.boundary_quads()
    e = vx.quad_edges(quads)
    if hm.lattice is None:
        raise ValueError("mesh has no lattice coordinates")
    L = hm.lattice.astype(np.float64)
    n = np.cross(L[quads[:, 1]] - L[quads[:, 0]], L[quads[:, 3]] - L[quads[:, 0]])
    dirs = np.argmax(np.abs(n), axis=1) * 2 + (n[np.arange(len(n)), np.argmax(np.abs(n), axis=1)] < 0)
    face_dir = np.repeat(dirs, 4)
    edges, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    dmin = np.full(len(edges), 99)
    dmax = np.full(len(edges), -1)
    np.minimum.at(dmin, inv, face_dir)
    np.maximum.at(dmax, inv, face_dir)
    return quads, edges, edges[dmin != dmax]


def _crease_chains(n_verts, crease):
    """Corners (crease valence >= 3) and the vertex chains joining them."""
    adj = [[] for _ in range(n_verts)]
    for a, b in crease:
        adj[a].append(b)
        adj[b].append(a)
    val = np.array([len(x) for x in adj])
    corners = np.nonzero(val >= 3)[0]
    is_corner = val >= 3
    chains, seen = [], set()
    for c in corners:
        for nb in sorted(adj[c]):
            if (c, nb) in seen:
                continue
            path = [c, nb]
            prev, cur = c, nb
            while not is_corner[cur]:
                nxt = [x for x in adj[cur] if x != prev]
                if len(nxt) != 1:
                    break
                prev, cur = cur, nxt[0]
                path.append(cur)
            seen.add((path[0], path[1]))
            seen.add((path[-1], path[-2]))
            if is_corner[path[-1]]:
                chains.append(path)
    return corners, chains


def _anchor_positions(hm, vm, corr, poly, mesh, idx, k, radius):
    """k-NN anchor averaging in the polycube domain followed by surface projection."""
    P = np.asarray(poly.points if hasattr(poly, "points") else poly, dtype=np.float64)[:, :3]
    anchors = mesh.evaluate(corr.face_id, corr.bary)
    tree = cKDTree(P)
    kk = min(k, len(P))
    d, j = tree.query(hm.vertices[idx], k=kk)
    d = d.reshape(len(idx), kk)
    j = j.reshape(len(idx), kk)
    target = anchors[j].mean(axis=1)
    exact = d[:, 0] <= 1e-12 * vm.h
    target[exact] = anchors[j[exact, 0]]
    ok = d[:, 0] <= radius * vm.h
    return target, ok, exact, j[:, 0]


def anchor_boundary(hm: HexMesh, vm: VoxelModel, corr, poly, mesh: TriMesh, k: int = 4,
                    radius: float = 3.0) -> HexMesh:
    """Move boundary vertices onto ``mesh`` through the correspondence anchors.

    Each boundary vertex averages the anchor positions of its ``k`` nearest
    polycube points and is projected to the closest surface point, whose
    (face, barycentric) pair becomes its anchor. A vertex that coincides
    with a polycube point reuses that point's anchor directly. Vertices with
    no polycube point within ``radius * h`` stay put and are reported.
    """
    out = hm.copy()
    idx = np.nonzero(out.boundary)[0]
    if len(idx) == 0:
        return out
    target, ok, exact, j0 = _anchor_positions(out, vm, corr, poly, mesh, idx, k, radius)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} boundary vertex(es) left unanchored", stacklevel=2)
    fid, bary, pos, _ = closest_point_on_mesh(mesh, target[ok & ~exact])
    sel = idx[ok & ~exact]
    out.vertices[sel], out.face_id[sel], out.bary[sel] = pos, fid, bary
    sel = idx[ok & exact]
    je = j0[ok & exact]
    out.face_id[sel], out.bary[sel] = corr.face_id[je], corr.bary[je]
    out.vertices[sel] = mesh.evaluate(out.face_id[sel], out.bary[sel])
    return out


def _anchor_on_edge(mesh, edge_faces, p, q, t):
    """(face, bary) of the point ``(1 - t) p + t q`` on mesh edge ``pq``."""
    f = edge_faces[(min(p, q), max(p, q))]
    tri = list(mesh.faces[f])
    b = np.zeros(3)
    b[tri.index(p)] += 1.0 - t
    b[tri.index(q)] += t
    return f, b


def conform_features(hm: HexMesh, mesh: TriMesh, angle_deg: float = 30.0,
                     snap_radius: float = 0.5) -> HexMesh:
    """Pin polycube corners and crease chains to the mesh's sharp features.

    Corners move to the nearest mesh feature vertex (feature-edge valence
    >= 3) within ``snap_radius`` voxel units; chains between two snapped
    corners are spread at equal arc length along the shortest feature-edge
    path; the remaining boundary vertices are placed by a harmonic solve
    over the boundary surface and projected back onto the mesh.
    """
    out = hm.copy()
    quads, sedges, crease = _surface_graph(out)
    n = len(out.vertices)
    corners, chains = _crease_chains(n, crease)
    fixed = np.zeros(n, bool)
    fe = feature_edges(mesh, angle_deg)
    nv = len(mesh.vertices)
    val = np.bincount(fe.ravel(), minlength=nv)
    fverts = np.nonzero(val >= 3)[0]
    snapped = {}
    if len(fverts) and len(corners):
        tree = cKDTree(mesh.vertices[fverts])
        d, j = tree.query(out.vertices[corners])
        scale = snap_radius * out.voxel_unit
        for c, dd, jj in zip(corners, d, j):
            if dd <= scale:
                snapped[int(c)] = int(fverts[jj])
    # one incident face per mesh edge, for anchors of points on edges
    F = mesh.faces
    edge_faces = {}
    for fi in range(len(F)):
        for a, b in ((F[fi, 0], F[fi, 1]), (F[fi, 1], F[fi, 2]), (F[fi, 2], F[fi, 0])):
            edge_faces.setdefault((min(a, b), max(a, b)), fi)
    for c, mv in snapped.items():
        f = int(np.nonzero((F == mv).any(axis=1))[0][0])
        tri = list(F[f])
        b = np.zeros(3)
        b[tri.index(mv)] = 1.0
        out.vertices[c] = mesh.vertices[mv]
        out.face_id[c], out.bary[c] = f, b
        fixed[c] = True
    if len(fe) and chains:
        w = np.linalg.norm(mesh.vertices[fe[:, 0]] - mesh.vertices[fe[:, 1]], axis=1)
        G = sp.coo_matrix((np.concatenate([w, w]), (np.concatenate([fe[:, 0], fe[:, 1]]),
                                                     np.concatenate([fe[:, 1], fe[:, 0]]))),
                          shape=(nv, nv)).tocsr()
        sources = sorted({snapped[ch[0]] for ch in chains if ch[0] in snapped and ch[-1] in snapped})
        if sources:
            dist, pred = dijkstra(G, indices=sources, return_predecessors=True)
            row = {s_: r for r, s_ in enumerate(sources)}
            for ch in chains:
                if ch[0] not in snapped or ch[-1] not in snapped:
                    continue
                s_, t_ = snapped[ch[0]], snapped[ch[-1]]
                r = row[s_]
                if not np.isfinite(dist[r, t_]) or s_ == t_:
                    continue
                path = [t_]
                while path[-1] != s_:
                    path.append(int(pred[r, path[-1]]))
                path = path[::-1]
                seg = np.linalg.norm(np.diff(mesh.vertices[path], axis=0), axis=1)
                cum = np.concatenate([[0.0], np.cumsum(seg)])
                total = cum[-1]
                m = len(ch) - 1
                for i, v in enumerate(ch[1:-1], 1):
                    target = total * i / m
                    e = min(int(np.searchsorted(cum, target, side="right")) - 1, len(seg) - 1)
                    t = (target - cum[e]) / seg[e]
                    a, b = path[e], path[e + 1]
                    out.vertices[v] = (1.0 - t) * mesh.vertices[a] + t * mesh.vertices[b]
                    out.face_id[v], out.bary[v] = _anchor_on_edge(mesh, edge_faces, a, b, t)
                    fixed[v] = True
    # harmonic fill of the remaining surface vertices, then projection
    bnd = out.boundary
    free = np.nonzero(bnd & ~fixed)[0]
    if len(free) and fixed.any():
        out.vertices[free] = _harmonic(out.vertices, sedges, free, n)
        fid, bary, pos, _ = closest_point_on_mesh(mesh, out.vertices[free])
        out.vertices[free], out.face_id[free], out.bary[free] = pos, fid, bary
    return out


def _harmonic(X, edges, free, n):
    """Positions of ``free`` vertices minimizing the graph Dirichlet energy, others fixed."""
    a, b = edges[:, 0], edges[:, 1]
    A = sp.coo_matrix((np.ones(2 * len(a)), (np.concatenate([a, b]), np.concatenate([b, a]))),
                      shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    L = sp.diags(deg) - A
    is_free = np.zeros(n, bool)
    is_free[free] = True
    fixed = np.nonzero(~is_free)[0]
    Lff = L[free][:, free].tocsc()
    rhs = -(L[free][:, fixed] @ X[fixed])
    sol = spsolve(Lff, rhs)
    return np.asarray(sol).reshape(len(free), 3)


def harmonic_interior(hm: HexMesh) -> HexMesh:
    """Interior vertices from a harmonic solve over hex edges, boundary fixed."""
    out = hm.copy()
    free = np.nonzero(~out.boundary)[0]
    if len(free) and out.boundary.any():
        out.vertices[free] = _harmonic(out.vertices, out.edges(), free, len(out.vertices))
    return out


def smooth_interior(hm: HexMesh, iters: int = 20, step: float = 0.5) -> HexMesh:
    """Damped Jacobi Laplacian on interior vertices; boundary vertices stay fixed."""
    if not 0.0 <= step <= 1.0:
        raise ValueError(f"step must lie in [0, 1], got {step}")
    out = hm.copy()
    if iters <= 0 or step == 0.0 or len(out.cells) == 0:
        return out
    e = out.edges()
    n = len(out.vertices)
    A = sp.coo_matrix((np.ones(2 * len(e)), (np.concatenate([e[:, 0], e[:, 1]]),
                                             np.concatenate([e[:, 1], e[:, 0]]))),
                      shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    move = ~out.boundary & (deg > 0)
    X = out.vertices
    for _ in range(iters):
        mean = (A @ X)[move] / deg[move, None]
        nxt = X.copy()
        nxt[move] = X[move] + step * (mean - X[move])
        X = nxt
    out.vertices = X
    return out


# ---------------------------------------------------------------- pillowing

def pillow_boundary(hm: HexMesh, thickness: float = 0.25) -> HexMesh:
    """Insert one inset layer of hexes under every boundary quad.

    Boundary vertices keep their place and anchors; each gets an inner copy
    moved along the averaged inward quad normal by ``thickness * unit``.
    Existing cells are re-pointed at the inner copies and every boundary
    quad gains one new hex joining it to its inner copy.
    """
    if not 0.0 < thickness < 0.5:
        raise ValueError(f"thickness must lie in (0, 0.5), got {thickness}")
    quads = hm.boundary_quads()
    if len(quads) == 0:
        raise ValidityError("mesh has no boundary to pillow")
    bidx = np.unique(quads)
    n = len(hm.vertices)
    X = hm.vertices
    qn = np.cross(X[quads[:, 2]] - X[quads[:, 0]], X[quads[:, 3]] - X[quads[:, 1]])
    qn /= np.maximum(np.linalg.norm(qn, axis=1, keepdims=True), 1e-300)
    acc = np.zeros((n, 3))
    np.add.at(acc, quads.ravel(), np.repeat(qn, 4, axis=0))
    nrm = np.linalg.norm(acc[bidx], axis=1, keepdims=True)
    inward = -acc[bidx] / np.maximum(nrm, 1e-300)
    new_id = np.arange(n)
    new_id[bidx] = n + np.arange(len(bidx))
    inner = X[bidx] + thickness * hm.unit * inward
    verts = np.vstack([X, inner])
    cells = new_id[hm.cells]
    layer = np.hstack([new_id[quads], quads])
    cells = np.vstack([cells, layer])
    lat = None
    if hm.lattice is not None:
        lat = np.vstack([hm.lattice, hm.lattice[bidx]])
    fid = np.concatenate([hm.face_id, np.full(len(bidx), -1)])
    bary = np.vstack([hm.bary, np.zeros((len(bidx), 3))])
    out = HexMesh(verts, cells, lat, hm.unit, fid, bary, hm.subdiv)
    q = quality(out)
    if q.inverted:
        raise PillowingError(f"pillow layer inverts {q.inverted} cell(s); original mesh kept", hm)
    return out


# ---------------------------------------------------------------- VTK

VTK_HEADER = "# vtk DataFile Version 3.0"


def export_vtk(hm: HexMesh, path, title: str = "polyhex hex mesh") -> None:
    """Legacy ASCII unstructured grid, hexahedra (type 12), scaled Jacobian as cell data."""
    q = quality(hm)
    with open(path, "w") as fh:
        fh.write(f"{VTK_HEADER}\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(hm.vertices)} double\n")
        for v in hm.vertices:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        C = len(hm.cells)
        fh.write(f"CELLS {C} {9 * C}\n")
        for c in hm.cells:
            fh.write("8 " + " ".join(str(int(i)) for i in c) + "\n")
        fh.write(f"CELL_TYPES {C}\n")
        fh.write("12\n" * C)
        if C:
            fh.write(f"CELL_DATA {C}\nSCALARS scaled_jacobian double 1\nLOOKUP_TABLE default\n")
            for j in q.cell_jacobian:
                fh.write(f"{j:.17g}\n")


def read_vtk(path) -> tuple[HexMesh, np.ndarray | None]:
    """Read a file written by :func:`export_vtk`; returns the mesh and cell scalars."""
    with open(path) as fh:
        tok = fh.read().split("\n")
    if not tok or tok[0].strip() != VTK_HEADER:
        raise DataError("not a legacy VTK file", path, 1)
    words = " ".join(tok[4:]).split()
    pos = 0

    def expect(w):
        nonlocal pos
        if pos >= len(words) or words[pos] != w:
            raise DataError(f"expected {w!r} in VTK body", path)
        pos += 1

    if "DATASET UNSTRUCTURED_GRID" not in tok[3]:
        raise DataError("only UNSTRUCTURED_GRID is supported", path, 4)
    expect("POINTS")
    npts = int(words[pos])
    pos += 2
    pts = np.array(words[pos:pos + 3 * npts], dtype=np.float64).reshape(-1, 3)
    pos += 3 * npts
    expect("CELLS")
    nc = int(words[pos])
    pos += 2
    cells = np.array(words[pos:pos + 9 * nc], dtype=np.int64).reshape(-1, 9)
    pos += 9 * nc
    if len(cells) and np.any(cells[:, 0] != 8):
        raise DataError("only hexahedral cells are supported", path)
    expect("CELL_TYPES")
    pos += 1
    types = np.array(words[pos:pos + nc], dtype=np.int64)
    pos += nc
    if np.any(types != 12):
        raise DataError("cell type other than 12 (hexahedron)", path)
    scalars = None
    if pos < len(words) and words[pos] == "CELL_DATA":
        pos += 1 + 1 + 4 + 2
        scalars = np.array(words[pos:pos + nc], dtype=np.float64)
    return HexMesh(pts, cells[:, 1:]), scalars
