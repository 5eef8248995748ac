"""Explicit polycube structure from a labeled point cloud.

Steps: axis labels from normals, per-axis 1D gap clustering of plane
offsets split into footprint-connected patches, integer snapping on a grid
of unit ``h``, and parity voxelization of the enclosed volume.

Grid coordinates: a world point ``p`` has lattice coordinate
``(p - origin) / h``; voxel ``(i, j, k)`` spans one lattice cell.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import label as nd_label
from scipy.spatial import cKDTree

from . import voxels as vx
from .errors import DataError, ValidityError

LABELS = vx.LABEL_NAMES
_AXIS_DIRS = vx.DIRECTIONS.astype(np.float64)


class LabelError(DataError):
    """Some points carry a zero normal and cannot be labeled."""

    def __init__(self, indices):
        self.indices = np.asarray(indices)
        head = ", ".join(str(i) for i in self.indices[:10])
        super().__init__(f"{len(self.indices)} point(s) with zero normal: {head}")


class CollisionError(ValidityError):
    """Distinct planes snapped onto one grid plane (grid unit too coarse)."""


class WatertightError(ValidityError):
    """Patches do not bound a closed volume."""

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


# ---------------------------------------------------------------- labels

def label_points(normals: np.ndarray) -> np.ndarray:
    """Index into (+X, -X, +Y, -Y, +Z, -Z) of the best-aligned axis per normal.

    ``argmax`` returns the first maximum, which gives the fixed tie order.
    """
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    zero = np.nonzero(~(np.abs(n).max(axis=1) > 0))[0]
    if len(zero):
        raise LabelError(zero)
    return np.argmax(n @ _AXIS_DIRS.T, axis=1)


def estimate_normals(points: np.ndarray, k: int = 12, reference: np.ndarray | None = None
                     ) -> np.ndarray:
    """k-NN plane-fit normals, oriented to agree with ``reference`` or away from the centroid."""
    P = np.asarray(points, dtype=np.float64)[:, :3]
    k = min(k, len(P))
    _, idx = cKDTree(P).query(P, k=k)
    nb = P[idx] - P[idx].mean(axis=1, keepdims=True)
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", nb, nb))
    n = vecs[:, :, 0]
    ref = reference if reference is not None else P - P.mean(axis=0)
    flip = (n * ref).sum(axis=1) < 0
    n[flip] *= -1
    return n


# ---------------------------------------------------------------- patches

@dataclass
class PlanarPatch:
    label: int
    offset: float
    members: np.ndarray
    footprint: set = field(default_factory=set)
    snapped: int | None = None

    @property
    def axis(self) -> int:
        return self.label // 2

    @property
    def name(self) -> str:
        return LABELS[self.label]


def split_gaps(values: np.ndarray, gap: float) -> list[np.ndarray]:
    """Index groups of ``values`` after sorting, split where consecutive gaps exceed ``gap``."""
    order = np.argsort(values, kind="stable")
    if len(order) == 0:
        return []
    cuts = np.nonzero(np.diff(values[order]) > gap)[0] + 1
    return np.split(order, cuts)


def _footprint_cells(points, axis, h, origin):
    b, c = (axis + 1) % 3, (axis + 2) % 3
    return np.floor((points[:, [b, c]] - origin[[b, c]]) / h).astype(np.int64)


def cluster_planes(points: np.ndarray, labels: np.ndarray, gap: float, h: float = 1.0,
                   origin=None, min_support: float = 0.2) -> list[PlanarPatch]:
    """Per-label gap clustering of plane offsets, then connected footprints.

    Footprint cells holding fewer than ``min_support`` times the patch's
    fullest cell are dropped as spill-over across the face border.
    """
    if not gap > 0:
        raise ValueError(f"gap must be positive, got {gap}")
    P = np.asarray(points, dtype=np.float64)[:, :3]
    labels = np.asarray(labels)
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    patches = []
    for lab in range(6):
        idx = np.nonzero(labels == lab)[0]
        if len(idx) == 0:
            continue
        axis = lab // 2
        for grp in split_gaps(P[idx, axis], gap):
            members = idx[grp]
            cells = _footprint_cells(P[members], axis, h, origin)
            lo = cells.min(axis=0)
            shape = tuple(cells.max(axis=0) - lo + 1)
            counts = np.zeros(shape, np.int64)
            np.add.at(counts, tuple((cells - lo).T), 1)
            keep = counts >= max(1.0, min_support * float(counts.max()))
            comp, n = nd_label(keep)
            cell_comp = comp[tuple((cells - lo).T)]
            for c in range(1, n + 1):
                sel = cell_comp == c
                cs = np.argwhere(comp == c) + lo
                m = members[sel]
                patches.append(PlanarPatch(lab, float(P[m, axis].mean()), m,
                                           {tuple(int(v) for v in row) for row in cs}))
    return patches


def estimate_unit(offsets_by_axis: list[np.ndarray]) -> float:
    """Smallest gap between distinct plane offsets, rounded to one significant digit."""
    gaps = [np.diff(np.sort(o)) for o in offsets_by_axis if len(o) > 1]
    gaps = np.concatenate(gaps) if gaps else np.zeros(0)
    gaps = gaps[gaps > 0]
    if len(gaps) == 0:
        raise ValidityError("cannot estimate a grid unit: fewer than two planes on every axis")
    g = float(gaps.min())
    e = math.floor(math.log10(g))
    return float(f"{math.floor(g / 10**e + 0.5)}e{e}")


def snap_to_grid(patches: list[PlanarPatch], h: float, origin=None) -> list[PlanarPatch]:
    """Integer plane offsets ``round((offset - origin) / h)``; collisions raise."""
    if not h > 0:
        raise ValueError(f"grid unit must be positive, got {h}")
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    for p in patches:
        p.snapped = int(round((p.offset - origin[p.axis]) / h))
    seen: dict[tuple[int, int], list[PlanarPatch]] = {}
    for p in patches:
        seen.setdefault((p.axis, p.snapped), []).append(p)
    for (axis, k), group in seen.items():
        for i, a in enumerate(group):
            for b in group[i + 1:]:
                if not (a.footprint & b.footprint):
                    continue
                if a.label == b.label:
                    raise CollisionError(
                        f"patches at offsets {a.offset:.4g} and {b.offset:.4g} ({a.name}) snap to "
                        f"the same plane {k}; grid unit {h} too coarse")
                raise CollisionError(
                    f"opposite patches {a.name}/{b.name} meet on plane {k} with overlapping "
                    f"footprints: feature thinner than one grid unit")
    return patches


# ---------------------------------------------------------------- voxel model

@dataclass
class VoxelModel:
    voxels: np.ndarray
    h: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.voxels = vx.as_voxels(self.voxels)
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.h = float(self.h)

    def __len__(self):
        return len(self.voxels)

    def boundary_faces(self) -> np.ndarray:
        return vx.boundary_faces(self.voxels)

    def surface(self, scale: int = 1) -> tuple[np.ndarray, np.ndarray]:
        """Lattice vertices (integer, in units of ``1/scale``) and boundary quads."""
        return vx.quad_surface(self.boundary_faces(), scale)

    def to_world(self, lattice: np.ndarray, scale: int = 1) -> np.ndarray:
        return self.origin + self.h * np.asarray(lattice, dtype=np.float64) / scale

    def to_lattice(self, world: np.ndarray) -> np.ndarray:
        return (np.asarray(world, dtype=np.float64) - self.origin) / self.h

    def is_watertight(self) -> bool:
        _, quads = self.surface()
        _, counts = vx.edge_counts(quads)
        return bool(np.all(counts % 2 == 0))

    def euler_characteristic(self) -> int:
        v, q = self.surface()
        return vx.euler_characteristic(v, q)


def voxelize(patches: list[PlanarPatch], h: float = 1.0, origin=None) -> VoxelModel:
    """Parity fill of the volume bounded by snapped patches.

    A voxel is interior when a ray from its center toward +X crosses an odd
    number of X-facing footprint cells. The same test along +Y and +Z must
    agree, and the resulting boundary must reproduce the patch faces.
    """
    origin = np.zeros(3) if origin is None else np.asarray(origin, dtype=np.float64)
    if not patches:
        raise WatertightError("no patches to voxelize")
    if any(p.snapped is None for p in patches):
        raise ValueError("patches must be snapped before voxelizing")
    # patch faces as (voxel, direction) rows; a +a face at plane k belongs to voxel k-1
    faces = set()
    for p in patches:
        a, b, c = p.axis, (p.axis + 1) % 3, (p.axis + 2) % 3
        for cb, cc in p.footprint:
            v = [0, 0, 0]
            v[a] = p.snapped - 1 if p.label % 2 == 0 else p.snapped
            v[b], v[c] = cb, cc
            faces.add((*v, p.label))
    F = np.array(sorted(faces), dtype=np.int64)
    lo = F[:, :3].min(axis=0) - 1
    hi = F[:, :3].max(axis=0) + 2
    shape = tuple(hi - lo)
    # planes[a][..] marks crossing cells: index along a is the plane coordinate
    occ = []
    for a in range(3):
        planes = np.zeros(tuple(s + 1 for s in shape), np.int64)
        sel = F[F[:, 3] // 2 == a]
        pl = sel[:, :3] - lo
        pl[:, a] += (sel[:, 3] % 2 == 0)  # +a face lies on the voxel's upper plane
        np.add.at(planes, tuple(pl.T), 1)
        planes = planes[tuple(slice(0, s) if ax != a else slice(None) for ax, s in enumerate(shape))]
        # crossings strictly above voxel center: planes index > i
        rev = np.flip(np.cumsum(np.flip(planes, a), axis=a), a)
        above = np.take(rev, np.arange(1, shape[a] + 1), axis=a)
        occ.append(above % 2 == 1)
    bad = np.argwhere((occ[0] != occ[1]) | (occ[0] != occ[2]))
    if len(bad):
        cols = sorted({(int(j + lo[1]), int(k + lo[2])) for _, j, k in bad})
        raise WatertightError(
            f"parity disagrees between ray directions in {len(cols)} column(s), "
            f"e.g. (y, z) = {cols[:5]}: open boundary", cols)
    vox = np.argwhere(occ[0]) + lo
    if len(vox) == 0:
        raise WatertightError("patches enclose no volume")
    vm = VoxelModel(vox, h, origin)
    derived = {tuple(r) for r in vm.boundary_faces().tolist()}
    if derived != faces:
        missing = len(faces - derived)
        extra = len(derived - faces)
        raise WatertightError(
            f"voxel boundary disagrees with the patches ({missing} patch face(s) not on the "
            f"boundary, {extra} boundary face(s) without a patch)")
    if not vm.is_watertight():
        raise WatertightError("boundary has an edge with odd face count")
    return vm


# ---------------------------------------------------------------- structure

@dataclass
class StructureReport:
    voxels: int
    boundary_faces: int
    corners: int
    corner_valence: dict
    components: int
    euler: list
    genus: list
    nonmanifold_edges: int
    watertight: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def structure_report(vm: VoxelModel) -> StructureReport:
    faces = vm.boundary_faces()
    verts, quads = vx.quad_surface(faces)
    edges, counts = vx.edge_counts(quads)
    # crease edges: the incident faces do not all share one direction
    e_all = vx.quad_edges(quads)
    face_dir = np.repeat(faces[:, 3], 4)
    _, inv = np.unique(e_all, axis=0, return_inverse=True)
    inv = inv.ravel()
    dmin = np.full(len(edges), 99)
    dmax = np.full(len(edges), -1)
    np.minimum.at(dmin, inv, face_dir)
    np.maximum.at(dmax, inv, face_dir)
    crease = edges[dmin != dmax]
    valence = np.bincount(crease.ravel(), minlength=len(verts))
    corner = np.nonzero(valence >= 3)[0]
    hist = {int(k): int(v) for k, v in zip(*np.unique(valence[corner], return_counts=True))}
    ncomp, lab = vx.surface_components(len(verts), quads)
    euler, genus = [], []
    for c in range(ncomp):
        q = quads[lab == c]
        chi = vx.euler_characteristic(verts, q)
        euler.append(chi)
        genus.append((2 - chi) / 2)
    return StructureReport(len(vm), len(faces), len(corner), hist, ncomp, euler, genus,
                           int((counts > 2).sum()), bool(np.all(counts % 2 == 0)))


# ---------------------------------------------------------------- driver

@dataclass
class PolycubeResult:
    model: VoxelModel
    patches: list
    labels: np.ndarray
    h: float
    origin: np.ndarray


def recover(points: np.ndarray, normals: np.ndarray, h: float | None = None,
            gap_factor: float = 0.35, reestimate: bool = False, k: int = 12,
            min_support: float = 0.2) -> PolycubeResult:
    """Labels, patches, snapping and voxelization in one call.

    With ``h`` unset the grid unit comes from a preliminary clustering at
    a gap of 5% of the bounding-box extent.
    """
    P = np.asarray(points, dtype=np.float64)[:, :3]
    N = np.asarray(normals, dtype=np.float64)[:, :3]
    if reestimate:
        N = estimate_normals(P, k, reference=N)
    labels = label_points(N)
    extent = float(np.ptp(P, axis=0).max())
    pre_gap = gap_factor * h if h else 0.05 * extent
    offsets = [[] for _ in range(3)]
    for lab in range(6):
        idx = np.nonzero(labels == lab)[0]
        for grp in split_gaps(P[idx, lab // 2], pre_gap):
            offsets[lab // 2].append(float(P[idx[grp], lab // 2].mean()))
    offsets = [np.array(o) for o in offsets]
    if h is None:
        h = estimate_unit(offsets)
    origin = np.array([o.min() if len(o) else 0.0 for o in offsets])
    patches = cluster_planes(P, labels, gap_factor * h, h, origin, min_support)
    snap_to_grid(patches, h, origin)
    return PolycubeResult(voxelize(patches, h, origin), patches, labels, h, origin)


def save_voxels(path, vm: VoxelModel) -> None:
    with open(path, "w") as fh:
        fh.write(f"voxels h={vm.h:.17g}\n")
        o = vm.origin
        fh.write(f"# origin {o[0]:.17g} {o[1]:.17g} {o[2]:.17g}\n")
        for v in vm.voxels:
            fh.write(f"{v[0]} {v[1]} {v[2]}\n")


def load_voxels(path) -> VoxelModel:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith("voxels h="):
        raise DataError("expected header 'voxels h=<unit>'", path, 1)
    try:
        h = float(lines[0].split("=", 1)[1])
    except ValueError:
        raise DataError("bad grid unit", path, 1) from None
    origin = np.zeros(3)
    rows = []
    for ln, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "#":
            if len(parts) == 5 and parts[1] == "origin":
                origin = np.array([float(x) for x in parts[2:]])
            continue
        if len(parts) != 3:
            raise DataError("expected three integers", path, ln)
        try:
            rows.append([int(x) for x in parts])
        except ValueError:
            raise DataError("non-integer voxel coordinate", path, ln) from None
    return VoxelModel(np.array(rows, dtype=np.int64).reshape(-1, 3), h, origin)
