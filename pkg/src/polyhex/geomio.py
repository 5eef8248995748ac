"""Triangle meshes, point clouds, surface sampling and the synthetic pair generator.

File formats
------------
OBJ
    ``v x y z`` and ``f a b c ...`` records with 1-based indices; polygons
    are fan-triangulated on read. Texture/normal suffixes (``a/b/c``) are
    accepted and ignored.
pcd
    ASCII. A header line ``pcd <count> <channels>`` followed by one point
    per line, ``channels`` in {3, 6}. Lines starting with ``#`` are skipped.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import voxels as vx
from .errors import DataError

DEGENERATE_AREA = 1e-12


# ---------------------------------------------------------------- types

@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    nonmanifold: bool = False

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise DataError(f"face index out of range for {len(self.vertices)} vertices")
            ext = np.ptp(self.vertices, axis=0).max() if len(self.vertices) else 0.0
            rel = self.areas / (ext * ext) if ext > 0 else np.zeros(len(self.faces))
            bad = np.nonzero(rel <= DEGENERATE_AREA)[0]
            if len(bad):
                raise DataError(f"{len(bad)} degenerate face(s), first is face {bad[0]}")

    @property
    def corners(self) -> np.ndarray:
        return self.vertices[self.faces]

    @property
    def _cross(self) -> np.ndarray:
        c = self.corners
        return np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])

    @property
    def areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._cross, axis=1)

    @property
    def normals(self) -> np.ndarray:
        n = self._cross
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())

    def evaluate(self, face_id: np.ndarray, bary: np.ndarray) -> np.ndarray:
        """Surface points from (face, barycentric) anchors."""
        c = self.vertices[self.faces[np.asarray(face_id, dtype=np.int64)]]
        b = np.asarray(bary, dtype=np.float64)
        return b[:, 0:1] * c[:, 0] + b[:, 1:2] * c[:, 1] + b[:, 2:3] * c[:, 2]


@dataclass
class ConditionCloud:
    """Surface samples with exact provenance on the source mesh."""

    points: np.ndarray
    face_id: np.ndarray
    bary: np.ndarray
    compensated: np.ndarray = field(default=None)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.face_id = np.asarray(self.face_id, dtype=np.int64).reshape(-1)
        self.bary = np.asarray(self.bary, dtype=np.float64).reshape(-1, 3)
        if self.compensated is None:
            self.compensated = np.zeros(len(self.points), bool)
        n = len(self.points)
        if len(self.face_id) != n or len(self.bary) != n or len(self.compensated) != n:
            raise DataError("provenance arrays do not match the point count")

    def __len__(self):
        return len(self.points)


@dataclass
class PolycubeCloud:
    points: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.points) != len(self.normals):
            raise DataError("points and normals differ in length")
        if len(self.normals):
            dev = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max()
            if dev > 1e-6:
                raise DataError(f"normals are not unit length (max deviation {dev:.3g})")

    def __len__(self):
        return len(self.points)

    @property
    def data(self) -> np.ndarray:
        return np.hstack([self.points, self.normals])


# ---------------------------------------------------------------- OBJ

def load_mesh(path) -> TriMesh:
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) < 3:
                        raise ValueError("face needs at least 3 vertices")
                    nv = len(verts)
                    poly = []
                    for i in idx:
                        if i == 0:
                            raise ValueError("OBJ indices are 1-based; got 0")
                        j = i - 1 if i > 0 else nv + i
                        if not 0 <= j < nv:
                            raise ValueError(f"vertex index {i} not defined yet")
                        poly.append(j)
                    faces.extend([poly[0], poly[k], poly[k + 1]] for k in range(1, len(poly) - 1))
            except ValueError as exc:
                raise DataError(str(exc), path, ln) from None
    mesh = TriMesh(np.array(verts).reshape(-1, 3), np.array(faces).reshape(-1, 3))
    mesh.nonmanifold = is_nonmanifold(mesh)
    if mesh.nonmanifold:
        warnings.warn(f"{path}: mesh has non-manifold edges", stacklevel=2)
    return mesh


def is_nonmanifold(mesh: TriMesh) -> bool:
    if len(mesh.faces) == 0:
        return False
    e = np.sort(np.stack([mesh.faces, np.roll(mesh.faces, -1, axis=1)], -1).reshape(-1, 2), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool((counts > 2).any())


def save_obj(path, vertices: np.ndarray, polygons) -> None:
    """Write vertices and 0-based polygons (triangles or quads) as OBJ."""
    with open(path, "w") as fh:
        for v in np.asarray(vertices, dtype=np.float64):
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for poly in np.asarray(polygons, dtype=np.int64):
            fh.write("f " + " ".join(str(int(i) + 1) for i in poly) + "\n")


def save_mesh(mesh: TriMesh, path) -> None:
    save_obj(path, mesh.vertices, mesh.faces)


# ---------------------------------------------------------------- pcd

def save_cloud(path, data) -> None:
    """Write an ``(n, 3)`` or ``(n, 6)`` array (or a cloud object) as pcd."""
    if isinstance(data, PolycubeCloud):
        data = data.data
    elif isinstance(data, ConditionCloud):
        data = data.points
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] not in (3, 6):
        raise DataError(f"cloud must have 3 or 6 channels, got shape {data.shape}")
    with open(path, "w") as fh:
        fh.write(f"pcd {len(data)} {data.shape[1]}\n")
        fmt = " ".join(["%.17g"] * data.shape[1])
        for row in data:
            fh.write(fmt % tuple(row) + "\n")


def load_cloud(path) -> np.ndarray:
    with open(path) as fh:
        lines = [(i, ln.split()) for i, ln in enumerate(fh, 1)]
    lines = [(i, p) for i, p in lines if p and not p[0].startswith("#")]
    if not lines:
        raise DataError("empty file, missing pcd header", path)
    ln, head = lines[0]
    if len(head) != 3 or head[0] != "pcd":
        raise DataError("expected header 'pcd <count> <channels>'", path, ln)
    try:
        count, ch = int(head[1]), int(head[2])
    except ValueError:
        raise DataError("non-integer count or channels in header", path, ln) from None
    if ch not in (3, 6) or count < 0:
        raise DataError(f"bad header values count={count} channels={ch}", path, ln)
    body = lines[1:]
    if len(body) != count:
        raise DataError(f"header declares {count} points, file has {len(body)}", path, ln)
    out = np.zeros((count, ch))
    for r, (ln, parts) in enumerate(body):
        if len(parts) != ch:
            raise DataError(f"expected {ch} values, got {len(parts)}", path, ln)
        try:
            out[r] = [float(x) for x in parts]
        except ValueError:
            raise DataError("non-numeric value", path, ln) from None
    return out


def load_polycube(path) -> PolycubeCloud:
    data = load_cloud(path)
    if data.shape[1] != 6:
        raise DataError("polycube cloud needs 6 channels (points and normals)", path)
    return PolycubeCloud(data[:, :3], data[:, 3:])


def save_provenance(path, cloud: ConditionCloud) -> None:
    """Sidecar with one ``face_id b0 b1 b2 compensated`` line per sample."""
    with open(path, "w") as fh:
        fh.write(f"prov {len(cloud)}\n")
        for f, b, c in zip(cloud.face_id, cloud.bary, cloud.compensated):
            fh.write(f"{int(f)} {b[0]:.17g} {b[1]:.17g} {b[2]:.17g} {int(c)}\n")


def load_provenance(path, points: np.ndarray) -> ConditionCloud:
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    if not rows or rows[0][0] != "prov":
        raise DataError("expected header 'prov <count>'", path, 1)
    n = int(rows[0][1])
    if len(rows) - 1 != n or n != len(points):
        raise DataError(f"provenance count {n} does not match {len(points)} points", path)
    arr = np.array([[float(x) for x in r] for r in rows[1:]]).reshape(-1, 5)
    return ConditionCloud(points, arr[:, 0].astype(np.int64), arr[:, 1:4], arr[:, 4] > 0)


# ---------------------------------------------------------------- sampling

def random_surface_points(mesh: TriMesh, n: int, rng: np.random.Generator):
    """Area-weighted uniform draws: face ids and barycentric weights."""
    areas = mesh.areas
    face_id = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = rng.random(n)
    r2 = rng.random(n)
    s = np.sqrt(r1)
    bary = np.column_stack([1.0 - s, s * (1.0 - r2), s * r2])
    return face_id, bary


def poisson_disk_sample(mesh: TriMesh, count: int, seed: int = 0, radius_factor: float = 0.85,
                        budget: int = 16) -> ConditionCloud:
    """Dart-throwing Poisson-disk samples with trim / compensation to exactly ``count``.

    Candidates are ``budget * count`` area-weighted draws accepted in index
    order when no accepted point lies within ``radius_factor * sqrt(A / count)``.
    Surplus accepted points are trimmed at random; a shortfall is topped up
    with unconstrained area-weighted draws, flagged in ``compensated``.
    """
    if count < 1:
        raise ValueError(f"sample count must be >= 1, got {count}")
    if len(mesh.faces) == 0 or mesh.total_area <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    r = radius_factor * math.sqrt(mesh.total_area / count)
    fid, bary = random_surface_points(mesh, budget * count, rng)
    pts = mesh.evaluate(fid, bary)
    keys = np.floor(pts / r).astype(np.int64).tolist()
    plist = pts.tolist()
    r2 = r * r
    grid: dict[tuple, list[int]] = {}
    accepted = []
    for i, (kx, ky, kz) in enumerate(keys):
        px, py, pz = plist[i]
        ok = True
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    for j in grid.get((kx + dx, ky + dy, kz + dz), ()):
                        qx, qy, qz = plist[j]
                        if (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2 < r2:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if not ok:
                break
        if ok:
            grid.setdefault((kx, ky, kz), []).append(i)
            accepted.append(i)
    acc = np.array(accepted, dtype=np.int64)
    if len(acc) > count:
        acc = np.sort(rng.choice(acc, size=count, replace=False))
    fid, bary = fid[acc], bary[acc]
    comp = np.zeros(len(acc), bool)
    short = count - len(acc)
    if short > 0:
        f2, b2 = random_surface_points(mesh, short, rng)
        fid = np.concatenate([fid, f2])
        bary = np.concatenate([bary, b2])
        comp = np.concatenate([comp, np.ones(short, bool)])
    cloud = ConditionCloud(mesh.evaluate(fid, bary), fid, bary, comp)
    cloud.radius = r
    return cloud


# ---------------------------------------------------------------- synthetic pairs

class SpecError(DataError):
    """Invalid synthetic shape specification."""


PRESETS = {
    "cube": [((0, 0, 0), (1, 1, 1))],
    "bar": [((0, 0, 0), (2, 1, 1))],
    "lshape": [((0, 0, 0), (2, 1, 1)), ((0, 1, 0), (1, 1, 1))],
    "frame": [((x, y, 0), (1, 1, 1)) for x in range(3) for y in range(3) if (x, y) != (1, 1)],
}


def _as_int_triple(v, what: str) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise SpecError(f"{what} must be three numbers, got {v!r}")
    if np.any(np.abs(a - np.round(a)) > 1e-9):
        raise SpecError(f"{what} must lie on the integer grid, got {v!r}")
    return np.round(a).astype(np.int64)


@dataclass
class ShapeSpec:
    boxes: list
    amplitude: float = 0.0
    frequency: float = 0.0
    rotation: tuple = (0.0, 0.0, 0.0)
    subdiv: int = 4
    points: int = 2048

    @classmethod
    def parse(cls, spec) -> "ShapeSpec":
        """Accept a dict, a JSON string, a preset name, or a path to a JSON file."""
        if isinstance(spec, ShapeSpec):
            return spec
        if isinstance(spec, (str, Path)):
            s = str(spec)
            if s in PRESETS:
                spec = {"boxes": [{"origin": o, "size": z} for o, z in PRESETS[s]]}
            elif s.lstrip().startswith("{"):
                spec = json.loads(s)
            else:
                spec = json.loads(Path(s).read_text())
        if not isinstance(spec, dict):
            raise SpecError("shape spec must be a JSON object")
        known = {"boxes", "warp", "rotation", "subdiv", "points", "preset"}
        extra = set(spec) - known
        if extra:
            raise SpecError(f"unknown shape spec keys: {sorted(extra)}")
        raw = spec.get("boxes")
        if raw is None and "preset" in spec:
            raw = [{"origin": o, "size": z} for o, z in PRESETS[spec["preset"]]]
        if not raw:
            raise SpecError("shape spec needs at least one box")
        boxes = []
        for b in raw:
            o = _as_int_triple(b.get("origin", (0, 0, 0)), "box origin")
            z = _as_int_triple(b["size"], "box size")
            if np.any(z < 1):
                raise SpecError(f"box size must be >= 1 in every axis, got {z.tolist()}")
            boxes.append((o, z))
        warp = spec.get("warp") or {}
        amp = float(warp.get("amplitude", 0.0))
        freq = float(warp.get("frequency", 0.0))
        if amp < 0 or freq < 0 or amp * freq >= 0.5:
            raise SpecError("warp needs amplitude, frequency >= 0 and amplitude*frequency < 0.5")
        rot = tuple(float(a) for a in spec.get("rotation", (0.0, 0.0, 0.0)))
        if len(rot) != 3:
            raise SpecError("rotation needs three angles in degrees")
        sub = int(spec.get("subdiv", 4))
        pts = int(spec.get("points", 2048))
        if sub < 1 or pts < 1:
            raise SpecError("subdiv and points must be >= 1")
        return cls(boxes, amp, freq, rot, sub, pts)

    def voxels(self) -> np.ndarray:
        cells = []
        for o, z in self.boxes:
            g = np.stack(np.meshgrid(*[np.arange(o[a], o[a] + z[a]) for a in range(3)],
                                     indexing="ij"), -1).reshape(-1, 3)
            cells.append(g)
        return vx.as_voxels(np.concatenate(cells))

    def rotation_matrix(self) -> np.ndarray:
        ax, ay, az = np.radians(self.rotation)
        rx = np.array([[1, 0, 0], [0, math.cos(ax), -math.sin(ax)], [0, math.sin(ax), math.cos(ax)]])
        ry = np.array([[math.cos(ay), 0, math.sin(ay)], [0, 1, 0], [-math.sin(ay), 0, math.cos(ay)]])
        rz = np.array([[math.cos(az), -math.sin(az), 0], [math.sin(az), math.cos(az), 0], [0, 0, 1]])
        return rz @ ry @ rx

    def deform(self, p: np.ndarray) -> np.ndarray:
        """Smooth warp followed by rotation; maps the box union onto the CAD-like shape.

        The displacement ``A sin(f p_{a+1})`` on axis ``a`` has Jacobian
        ``I + D`` with ``|D| <= A f < 0.5``, so the map stays invertible.
        """
        p = np.asarray(p, dtype=np.float64)
        q = p.copy()
        if self.amplitude > 0:
            f = self.frequency
            q[:, 0] += self.amplitude * np.sin(f * p[:, 1])
            q[:, 1] += self.amplitude * np.sin(f * p[:, 2])
            q[:, 2] += self.amplitude * np.sin(f * p[:, 0])
        return q @ self.rotation_matrix().T


def box_union_mesh(voxels: np.ndarray, subdiv: int = 1) -> TriMesh:
    """Closed triangle mesh of a voxel union's boundary, each face split ``subdiv`` times."""
    verts, quads = vx.quad_surface(vx.boundary_faces(voxels), subdiv)
    tris = np.concatenate([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]])
    tris = tris.reshape(2, -1, 3).transpose(1, 0, 2).reshape(-1, 3)
    return TriMesh(verts / subdiv, tris)


def sample_voxel_surface(voxels: np.ndarray, count: int, rng: np.random.Generator) -> PolycubeCloud:
    """Uniform random points on the boundary of a voxel union with outward normals."""
    faces = vx.boundary_faces(voxels)
    corners = vx.face_corners(faces).astype(np.float64)
    pick = rng.integers(0, len(faces), size=count)
    u = rng.random(count)[:, None]
    v = rng.random(count)[:, None]
    c = corners[pick]
    pts = c[:, 0] + u * (c[:, 1] - c[:, 0]) + v * (c[:, 3] - c[:, 0])
    normals = vx.DIRECTIONS[faces[pick, 3]].astype(np.float64)
    return PolycubeCloud(pts, normals)


def synth_pair(shape_spec, seed: int = 0) -> tuple[TriMesh, PolycubeCloud]:
    """Warped CAD-like mesh of a box union and its polycube ground-truth cloud."""
    spec = ShapeSpec.parse(shape_spec)
    vox = spec.voxels()
    base = box_union_mesh(vox, spec.subdiv)
    mesh = TriMesh(spec.deform(base.vertices), base.faces)
    target = sample_voxel_surface(vox, spec.points, np.random.default_rng(seed))
    return mesh, target


# ---------------------------------------------------------------- closest point

def closest_on_triangles(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Closest point on triangles ``abc`` to ``p`` (broadcasting), and its barycentrics.

    Region tests follow the usual Voronoi-region walk over vertices, edges
    and the face interior.
    """
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    dot = lambda u, v: (u * v).sum(axis=-1)  # noqa: E731
    d1, d2 = dot(ab, ap), dot(ac, ap)
    d3, d4 = dot(ab, bp), dot(ac, bp)
    d5, d6 = dot(ab, cp), dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    shape = np.broadcast_shapes(d1.shape, d5.shape)
    u = np.empty(shape)
    v = np.empty(shape)
    w = np.empty(shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        den = va + vb + vc
        v[...] = vb / den
        w[...] = vc / den
        u[...] = 1.0 - v - w
        # later assignments take precedence, mirroring the early returns
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        u[m], v[m], w[m] = 0.0, 1.0 - t[m], t[m]
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        u[m], v[m], w[m] = 1.0 - t[m], 0.0, t[m]
        m = (d6 >= 0) & (d5 <= d6)
        u[m], v[m], w[m] = 0.0, 0.0, 1.0
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        u[m], v[m], w[m] = 1.0 - t[m], t[m], 0.0
        m = (d3 >= 0) & (d4 <= d3)
        u[m], v[m], w[m] = 0.0, 1.0, 0.0
        m = (d1 <= 0) & (d2 <= 0)
        u[m], v[m], w[m] = 1.0, 0.0, 0.0
    bary = np.stack([u, v, w], axis=-1)
    q = bary[..., 0:1] * a + bary[..., 1:2] * b + bary[..., 2:3] * c
    return q, bary


def closest_point_on_mesh(mesh: TriMesh, points: np.ndarray, chunk: int = 64
                          ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact closest surface point by exhaustive search over faces.

    Returns ``(face_id, bary, position, distance)``; the lowest face index
    wins exact ties.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if len(mesh.faces) == 0:
        raise ValueError("mesh has no faces")
    A, B, C = (mesh.vertices[mesh.faces[:, k]][None] for k in range(3))
    fid = np.empty(n, np.int64)
    bary = np.empty((n, 3))
    for lo in range(0, n, chunk):
        p = pts[lo:lo + chunk, None, :]
        q, bc = closest_on_triangles(p, A, B, C)
        diff = q - p
        d2 = (diff * diff).sum(axis=-1)
        j = np.argmin(d2, axis=1)
        fid[lo:lo + chunk] = j
        bary[lo:lo + chunk] = bc[np.arange(len(j)), j]
    pos = mesh.evaluate(fid, bary)
    return fid, bary, pos, np.linalg.norm(pos - pts, axis=1)


def feature_edges(mesh: TriMesh, angle_deg: float = 30.0) -> np.ndarray:
    """Mesh edges (sorted vertex pairs) whose dihedral turn exceeds ``angle_deg``.

    Open and non-manifold edges are always features.
    """
    F = mesh.faces
    e = np.sort(np.stack([F, np.roll(F, -1, axis=1)], -1).reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(len(F)), 3)
    uniq, inv, counts = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    order = np.argsort(inv, kind="stable")
    start = np.concatenate([[0], np.cumsum(counts)[:-1]])
    feat = counts != 2
    two = np.nonzero(counts == 2)[0]
    n = mesh.normals
    f0 = owner[order[start[two]]]
    f1 = owner[order[start[two] + 1]]
    cosang = (n[f0] * n[f1]).sum(axis=1)
    feat[two] = cosang < math.cos(math.radians(angle_deg))
    return uniq[feat]
