from __future__ import annotations

import numpy as np
import pytest
from scipy.ndimage import label as nd_label

import oracles
from polyhex import geomio as G
from polyhex import polycube as P

AXES = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)


def patches_from_voxels(vox):
    """Snapped patches built directly from boundary squares, one per (label, plane)."""
    groups = {}
    occ = {tuple(v) for v in vox}
    for v in occ:
        for lab in range(6):
            a, s = lab // 2, 1 if lab % 2 == 0 else -1
            n = list(v)
            n[a] += s
            if tuple(n) in occ:
                continue
            plane = v[a] + (1 if s > 0 else 0)
            b, c = (a + 1) % 3, (a + 2) % 3
            groups.setdefault((lab, plane), set()).add((v[b], v[c]))
    out = []
    for (lab, plane), fp in sorted(groups.items()):
        out.append(P.PlanarPatch(lab, float(plane), np.zeros(0, int), fp, plane))
    return out


def box(nx, ny, nz, o=(0, 0, 0)):
    g = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), -1)
    return g.reshape(-1, 3) + np.asarray(o)


FRAME = [(x, y, 0) for x in range(3) for y in range(3) if (x, y) != (1, 1)]


# ---------------------------------------------------------------- labels

def test_label_examples():
    assert P.label_points([[0, 0, 1]]).tolist() == [4]
    s = 1 / np.sqrt(2)
    assert P.label_points([[s, s, 0]]).tolist() == [0]
    assert P.label_points([[0, -s, -s]]).tolist() == [3]


def test_label_zero_normal():
    with pytest.raises(P.LabelError) as e:
        P.label_points([[1, 0, 0], [0, 0, 0], [0, 1, 0], [0, 0, 0]])
    assert e.value.indices.tolist() == [1, 3]


def test_label_cube_groups_equal():
    # 50 points on every face of a unit cube
    rng = np.random.default_rng(0)
    uv = rng.random((300, 2))
    pts, normals = [], []
    for lab, d in enumerate(AXES):
        a = lab // 2
        p = np.zeros((50, 3))
        p[:, [(a + 1) % 3, (a + 2) % 3]] = uv[lab * 50:(lab + 1) * 50]
        p[:, a] = 1.0 if lab % 2 == 0 else 0.0
        pts.append(p)
        normals.append(np.tile(d, (50, 1)))
    counts = np.bincount(P.label_points(np.vstack(normals)), minlength=6)
    assert counts.tolist() == [50] * 6
    patches = P.cluster_planes(np.vstack(pts), P.label_points(np.vstack(normals)), gap=0.3)
    assert sorted(len(p.members) for p in patches) == [50] * 6


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_label_rotation_permutes(axis):
    c, s = 0.0, 1.0
    R = np.eye(3)
    i, j = (axis + 1) % 3, (axis + 2) % 3
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    perm = [int(np.argmax(AXES @ (R @ d))) for d in AXES]
    n = np.random.default_rng(axis).normal(size=(500, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    before = P.label_points(n)
    after = P.label_points(n @ R.T)
    assert np.array_equal(after, np.array(perm)[before])


# ---------------------------------------------------------------- clustering

def test_cluster_cube_six_patches():
    pc = G.sample_voxel_surface(np.zeros((1, 3), int), 600, np.random.default_rng(1))
    labels = P.label_points(pc.normals)
    patches = P.cluster_planes(pc.points, labels, gap=0.3)
    assert len(patches) == 6
    offs = {p.name: p.offset for p in patches}
    for ax in "XYZ":
        assert abs(offs["+" + ax] - 1) < 1e-12 and abs(offs["-" + ax]) < 1e-12


def test_cluster_two_parallel_planes():
    rng = np.random.default_rng(2)
    pts = np.vstack([np.c_[rng.random((40, 2)), np.zeros(40)],
                     np.c_[rng.random((40, 2)), np.full(40, 2.0)]])
    patches = P.cluster_planes(pts, np.full(80, 4), gap=0.5)
    assert sorted(round(p.offset, 12) for p in patches) == [0.0, 2.0]


def test_cluster_single_plane_mean():
    rng = np.random.default_rng(3)
    z = rng.uniform(-0.05, 0.05, 60)
    pts = np.c_[rng.random((60, 2)), z]
    patches = P.cluster_planes(pts, np.full(60, 4), gap=0.3)
    assert len(patches) == 1
    assert abs(patches[0].offset - z.mean()) < 1e-12


def test_cluster_rejects_bad_gap():
    with pytest.raises(ValueError):
        P.cluster_planes(np.zeros((1, 3)), [0], gap=0)


# ---------------------------------------------------------------- snapping

def _patch(label, offset, fp=((0, 0),)):
    return P.PlanarPatch(label, offset, np.zeros(0, int), set(fp))


def test_snap_examples():
    ps = P.snap_to_grid([_patch(4, 0.02), _patch(4, 0.98), _patch(4, 2.01)], 1.0)
    assert [p.snapped for p in ps] == [0, 1, 2]


def test_snap_same_label_collision():
    with pytest.raises(P.CollisionError, match="too coarse"):
        P.snap_to_grid([_patch(4, 0.0), _patch(4, 0.4)], 1.0)


def test_snap_opposite_labels_thin_feature():
    with pytest.raises(P.CollisionError, match="thinner"):
        P.snap_to_grid([_patch(4, 0.9), _patch(5, 1.1)], 1.0)


def test_snap_disjoint_footprints_ok():
    ps = P.snap_to_grid([_patch(4, 0.0, [(0, 0)]), _patch(4, 0.3, [(5, 5)])], 1.0)
    assert [p.snapped for p in ps] == [0, 0]


def test_estimate_unit():
    assert P.estimate_unit([np.array([0.0, 0.98, 2.01])]) == 1.0
    assert P.estimate_unit([np.array([0.0, 0.5]), np.array([0.0, 0.26])]) == 0.3


def test_lshape_plan():
    mesh, pc = G.synth_pair({"preset": "lshape", "points": 3000}, 0)
    r = P.recover(pc.points, pc.normals)
    assert r.h == 1.0
    got = sorted(map(tuple, np.round(r.model.to_world(r.model.voxels)).astype(int).tolist()))
    assert got == [(0, 0, 0), (0, 1, 0), (1, 0, 0)]


# ---------------------------------------------------------------- voxelization

@pytest.mark.parametrize("vox,n,faces", [(box(1, 1, 1), 1, 6), (box(2, 1, 1), 2, 10), (FRAME, 8, 32)])
def test_voxelize_counts(vox, n, faces):
    vm = P.voxelize(patches_from_voxels(np.asarray(vox).tolist()))
    assert len(vm) == n
    assert len(vm.boundary_faces()) == faces == len(oracles.voxel_boundary(np.asarray(vox).tolist()))
    assert vm.is_watertight()


def test_voxelize_frame_euler_zero():
    vm = P.voxelize(patches_from_voxels(FRAME))
    assert vm.euler_characteristic() == 0 == oracles.voxel_euler(FRAME)


def test_voxelize_open_boundary():
    patches = patches_from_voxels(box(1, 1, 1).tolist())
    with pytest.raises(P.WatertightError) as e:
        P.voxelize([p for p in patches if p.label != 0])
    assert e.value.columns


def test_voxelize_requires_snapped():
    with pytest.raises(ValueError):
        P.voxelize([_patch(0, 1.0)])


# ---------------------------------------------------------------- structure report

def test_structure_cube():
    rep = P.structure_report(P.VoxelModel(box(1, 1, 1)))
    assert rep.corners == 8 and rep.corner_valence == {3: 8}
    assert rep.genus == [0] and rep.components == 1 and rep.watertight


def test_structure_frame_genus_one():
    rep = P.structure_report(P.VoxelModel(FRAME))
    assert rep.genus == [1] and rep.euler == [0]


def test_structure_two_cubes():
    rep = P.structure_report(P.VoxelModel([(0, 0, 0), (3, 0, 0)]))
    assert rep.components == 2 and rep.genus == [0, 0] and rep.voxels == 2


def test_structure_lshape_corners():
    rep = P.structure_report(P.VoxelModel(G.ShapeSpec.parse("lshape").voxels()))
    # six polygon vertices of the L, on both caps; the concave one is 3-valent too
    assert rep.corners == 12 and rep.corner_valence == {3: 12} and rep.genus == [0]


# ---------------------------------------------------------------- round trips

def _round_trip(vox, seed, h=1.0):
    nf = len(oracles.voxel_boundary(vox.tolist()))
    pc = G.sample_voxel_surface(vox, 24 * nf, np.random.default_rng(seed))
    r = P.recover(pc.points, pc.normals, h=h)
    return {tuple(v) for v in np.round(r.model.to_world(r.model.voxels)).astype(int).tolist()}


def _blobs():
    rng = np.random.default_rng(0)
    out = [box(10, 10, 10)]
    for size, p in ((6, 0.5), (8, 0.55), (10, 0.6)):
        lab, _ = nd_label(rng.random((size,) * 3) < p)
        big = np.argmax(np.bincount(lab.ravel())[1:]) + 1
        out.append(np.argwhere(lab == big))
    return out


@pytest.mark.parametrize("name", ["cube", "bar", "lshape", "frame"])
def test_round_trip_presets_estimated_unit(name):
    vox = G.ShapeSpec.parse(name).voxels()
    assert _round_trip(vox, 1, h=None) == {tuple(v) for v in vox.tolist()}


@pytest.mark.parametrize("i", range(4))
def test_round_trip_blobs(i):
    vox = _blobs()[i]
    assert len(vox) <= 1000
    assert _round_trip(vox, i) == {tuple(v) for v in vox.tolist()}


def test_voxels_file_round_trip(tmp_path):
    vm = P.VoxelModel(FRAME, 0.25, [1.0, -2.0, 0.5])
    P.save_voxels(tmp_path / "v.txt", vm)
    assert (tmp_path / "v.txt").read_text().startswith("voxels h=0.25\n")
    back = P.load_voxels(tmp_path / "v.txt")
    assert back.h == 0.25 and np.array_equal(back.origin, vm.origin)
    assert np.array_equal(back.voxels, vm.voxels)
