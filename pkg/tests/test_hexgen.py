from __future__ import annotations

import math

import numpy as np
import pytest

import oracles
from polyhex import geomio as G
from polyhex import hexgen as H
from polyhex import polycube as P
from polyhex import register as R

UNIT = H.CORNERS.astype(float)


def vm_of(vox):
    return P.VoxelModel(vox)


BAR = [(0, 0, 0), (1, 0, 0)]


# ---------------------------------------------------------------- extraction

def test_extract_single_voxel():
    hm = H.extract_hexes(vm_of([(0, 0, 0)]), 1)
    assert len(hm) == 1 and len(hm.vertices) == 8 and hm.boundary.all()
    assert np.array_equal(hm.vertices[hm.cells[0]], UNIT)


def test_extract_subdivided_voxel():
    hm = H.extract_hexes(vm_of([(0, 0, 0)]), 2)
    assert len(hm) == 8 and len(hm.vertices) == 27
    assert hm.boundary.sum() == 26
    assert np.array_equal(hm.vertices[~hm.boundary], [[0.5, 0.5, 0.5]])


def test_extract_bar():
    hm = H.extract_hexes(vm_of(BAR), 1)
    assert len(hm) == 2 and len(hm.vertices) == 12


def test_extract_scales_to_world():
    hm = H.extract_hexes(P.VoxelModel([(1, 0, 0)], 0.5, [1.0, 2.0, 3.0]), 1)
    assert np.allclose(hm.vertices.min(axis=0), [1.5, 2.0, 3.0])
    assert np.allclose(hm.vertices.max(axis=0), [2.0, 2.5, 3.5])


@pytest.mark.parametrize("name,s", [("cube", 3), ("lshape", 2), ("frame", 2)])
def test_conformity(name, s):
    vox = G.ShapeSpec.parse(name).voxels()
    hm = H.extract_hexes(vm_of(vox), s)
    c = hm.conformity()
    assert c["bad"] == 0
    nb = len(oracles.voxel_boundary(vox.tolist())) * s * s
    assert c["boundary"] == nb == len(hm.boundary_quads())
    assert 6 * len(hm) == c["boundary"] + 2 * c["interior"]
    assert H.quality(hm).j_min == 1.0


# ---------------------------------------------------------------- quality

def test_quality_unit_cube():
    q = H.quality(H.HexMesh(UNIT, [list(range(8))]))
    assert q.j_min == 1.0 and q.j_avg == 1.0 and q.inverted == 0


def test_quality_sheared_corner():
    v = UNIT.copy()
    v[4] = [1 / math.sqrt(2), 0, 1 / math.sqrt(2)]  # corner 0 frame (e_x, e_y, (e_x+e_z)/sqrt 2)
    cj = H.corner_jacobians(v, np.arange(8)[None])[0]
    assert abs(cj[0] - 1 / math.sqrt(2)) < 1e-12
    assert abs(cj[0] - 0.7071) < 1e-4


def test_quality_inverted():
    q = H.quality(H.HexMesh(UNIT, [[4, 5, 6, 7, 0, 1, 2, 3]]))
    assert q.j_min == -1.0 and q.inverted == 1


def test_quality_degenerate_edge_zero():
    v = UNIT.copy()
    v[1] = v[0]
    cj = H.corner_jacobians(v, np.arange(8)[None])[0]
    assert cj[0] == 0.0 and cj[1] == 0.0


def test_quality_matches_oracle_and_bounds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = UNIT + rng.normal(scale=0.3, size=(8, 3))
        cj = H.corner_jacobians(v, np.arange(8)[None])[0]
        ref = oracles.hex_corner_jacobians(v.tolist(), list(range(8)))
        assert np.max(np.abs(cj - ref)) < 1e-12
        assert np.all((cj >= -1) & (cj <= 1))


def test_quality_empty():
    q = H.quality(H.HexMesh(np.zeros((0, 3)), np.zeros((0, 8))))
    assert q.j_min is None and q.inverted == 0


# ---------------------------------------------------------------- smoothing

def _block(n=2):
    return H.extract_hexes(vm_of([(i, j, k) for i in range(n) for j in range(n) for k in range(n)]), 1)


def test_smooth_uniform_fixpoint():
    hm = _block(3)
    out = H.smooth_interior(hm, 20, 0.5)
    assert np.max(np.abs(out.vertices - hm.vertices)) < 1e-12


def test_smooth_single_vertex_recursion():
    hm = _block(2)
    c = int(np.nonzero(~hm.boundary)[0][0])
    hm.vertices[c] += [0.3, -0.2, 0.1]
    d0 = 0.3 ** 2 + 0.2 ** 2 + 0.1 ** 2
    for step in (0.5, 0.3, 1.0):
        out = H.smooth_interior(hm, 20, step)
        r = out.vertices[c] - [1, 1, 1]
        # the neighbor mean is fixed at the center, so the offset shrinks by (1 - step) per round
        assert abs(math.sqrt((r * r).sum()) - (1 - step) ** 20 * math.sqrt(d0)) < 1e-12


def test_smooth_step_zero_identity():
    hm = _block(2)
    hm.vertices[~hm.boundary] += 0.2
    out = H.smooth_interior(hm, 20, 0.0)
    assert np.array_equal(out.vertices, hm.vertices)
    with pytest.raises(ValueError):
        H.smooth_interior(hm, 1, 1.5)


def test_harmonic_interior_recovers_grid():
    hm = _block(3)
    ref = hm.vertices.copy()
    hm.vertices[~hm.boundary] += np.random.default_rng(0).normal(scale=0.2, size=(8, 3))
    out = H.harmonic_interior(hm)
    assert np.max(np.abs(out.vertices - ref)) < 1e-12


# ---------------------------------------------------------------- pillowing

@pytest.mark.parametrize("vox,cells", [([(0, 0, 0)], 7), (BAR, 12)])
def test_pillow_counts(vox, cells):
    hm = H.extract_hexes(vm_of(vox), 1)
    nq = len(hm.boundary_quads())
    out = H.pillow_boundary(hm, 0.25)
    assert len(out) == cells == len(hm) + nq
    assert len(out.boundary_quads()) == nq
    assert out.conformity()["bad"] == 0
    q = H.quality(out)
    assert q.inverted == 0 and q.j_min > 0
    assert np.array_equal(out.vertices[:len(hm.vertices)][hm.boundary], hm.vertices[hm.boundary])


def test_pillow_core_is_inset():
    out = H.pillow_boundary(H.extract_hexes(vm_of([(0, 0, 0)]), 1), 0.25)
    core = out.vertices[out.cells[0]]
    # each corner moves 0.25 along its averaged inward normal (1, 1, 1) / sqrt 3
    assert np.allclose(np.abs(core - 0.5), 0.5 - 0.25 / math.sqrt(3), rtol=0, atol=1e-12)


def test_pillow_thin_layer_rejected():
    hm = H.extract_hexes(vm_of([(0, 0, 0)]), 1)
    with pytest.raises(H.PillowingError) as e:
        H.pillow_boundary(hm, 1e-15)
    assert e.value.original is hm


@pytest.mark.parametrize("t", [0.0, 0.5, -0.1])
def test_pillow_thickness_range(t):
    with pytest.raises(ValueError):
        H.pillow_boundary(H.extract_hexes(vm_of([(0, 0, 0)]), 1), t)


# ---------------------------------------------------------------- VTK

def test_vtk_single_hex(tmp_path):
    hm = H.HexMesh(UNIT, [list(range(8))])
    H.export_vtk(hm, tmp_path / "h.vtk")
    lines = (tmp_path / "h.vtk").read_text().splitlines()
    assert lines[0] == "# vtk DataFile Version 3.0"
    assert lines[3] == "DATASET UNSTRUCTURED_GRID"
    assert "POINTS 8 double" in lines and "CELLS 1 9" in lines
    i = lines.index("CELL_TYPES 1")
    assert lines[i + 1] == "12"
    back, scalars = H.read_vtk(tmp_path / "h.vtk")
    assert np.max(np.abs(back.vertices - hm.vertices)) < 1e-6
    assert np.array_equal(back.cells, hm.cells) and scalars.tolist() == [1.0]


def test_vtk_round_trip_frame(tmp_path):
    hm = H.extract_hexes(vm_of(G.ShapeSpec.parse("frame").voxels()), 2)
    hm.vertices += np.random.default_rng(0).normal(scale=0.01, size=hm.vertices.shape)
    H.export_vtk(hm, tmp_path / "f.vtk")
    back, scalars = H.read_vtk(tmp_path / "f.vtk")
    assert np.max(np.abs(back.vertices - hm.vertices)) < 1e-6
    assert np.allclose(scalars, H.quality(hm).cell_jacobian)


def test_vtk_empty(tmp_path):
    H.export_vtk(H.HexMesh(np.zeros((0, 3)), np.zeros((0, 8))), tmp_path / "e.vtk")
    back, scalars = H.read_vtk(tmp_path / "e.vtk")
    assert len(back.vertices) == 0 and len(back.cells) == 0 and scalars is None


def test_boundary_obj_export(tmp_path):
    hm = H.extract_hexes(vm_of(BAR), 1)
    G.save_obj(tmp_path / "b.obj", hm.vertices, hm.boundary_quads())
    m = G.load_mesh(tmp_path / "b.obj")
    assert len(m.faces) == 20 and abs(m.total_area - 10) < 1e-12


# ---------------------------------------------------------------- anchoring

def _surface_anchors(mesh, pts):
    fid, bary, pos, _ = G.closest_point_on_mesh(mesh, pts)
    return G.ConditionCloud(pos, fid, bary)


def test_anchor_identity():
    vox = G.ShapeSpec.parse("lshape").voxels()
    vm = vm_of(vox)
    hm = H.extract_hexes(vm, 2)
    mesh = G.box_union_mesh(vox, 2)
    poly = hm.vertices[hm.boundary]
    ori = _surface_anchors(mesh, poly)
    corr = R.build_correspondence(poly, poly, ori)
    out = H.anchor_boundary(hm, vm, corr, poly, mesh)
    assert np.max(np.abs(out.vertices - hm.vertices)) < 1e-9
    b = out.boundary
    assert np.all(out.face_id[b] >= 0)
    assert np.max(np.abs(mesh.evaluate(out.face_id[b], out.bary[b]) - hm.vertices[b])) < 1e-9


def test_anchor_k1_uses_nearest_anchor():
    vm = vm_of([(0, 0, 0)])
    hm = H.extract_hexes(vm, 1)
    mesh = G.box_union_mesh(vm.voxels, 3)
    # one polycube point near each cube corner, anchored at a distinct surface point
    poly = hm.vertices * 0.9 + 0.05
    targets = hm.vertices * 0.8 + 0.1
    targets[:, 2] = np.where(hm.vertices[:, 2] > 0, 1.0, 0.0)
    ori = _surface_anchors(mesh, targets)
    corr = R.build_correspondence(poly, poly, ori)
    out = H.anchor_boundary(hm, vm, corr, poly, mesh, k=1)
    assert np.max(np.abs(out.vertices - targets)) < 1e-12


def test_anchor_far_vertices_warn():
    vm = vm_of([(0, 0, 0)])
    hm = H.extract_hexes(vm, 1)
    mesh = G.box_union_mesh(vm.voxels, 1)
    poly = np.array([[0.0, 0.0, 0.0]])
    ori = _surface_anchors(mesh, poly)
    corr = R.build_correspondence(poly, poly, ori)
    with pytest.warns(UserWarning, match="unanchored"):
        out = H.anchor_boundary(hm, vm, corr, poly, mesh, radius=1.0)
    assert np.array_equal(out.vertices[6], hm.vertices[6])


@pytest.fixture(scope="module")
def warped_cube():
    spec = G.ShapeSpec.parse({"preset": "cube", "warp": {"amplitude": 0.08, "frequency": 2.0},
                              "points": 1500})
    mesh, poly = G.synth_pair(spec, 0)
    cond = G.poisson_disk_sample(mesh, 1500, seed=1)
    T = R.rigid_align(poly.points, cond.points)
    deformed, _ = R.cpd_nonrigid(T.apply(poly.points), cond.points)
    corr = R.build_correspondence(poly.points, deformed, cond)
    vm = vm_of(spec.voxels())
    hm = H.extract_hexes(vm, 4)
    anchored = H.anchor_boundary(hm, vm, corr, poly.points, mesh)
    diag = float(np.linalg.norm(np.ptp(mesh.vertices, axis=0)))
    return spec, mesh, hm, anchored, diag


def test_anchor_warped_cube_surface_rmse(warped_cube):
    spec, mesh, hm, out, diag = warped_cube
    fine = G.box_union_mesh(spec.voxels(), 64)
    true_surface = G.TriMesh(spec.deform(fine.vertices), fine.faces)
    _, _, _, d = G.closest_point_on_mesh(true_surface, out.vertices[out.boundary])
    assert math.sqrt((d * d).mean()) < 0.02 * diag


def test_anchor_warped_cube_pointwise(warped_cube):
    # pointwise error against the known warp: anchoring alone halves the raw
    # grid error; with the feature-conform step it drops below 2% of the diagonal
    spec, mesh, hm, out, diag = warped_cube
    b = hm.boundary
    truth = spec.deform(hm.vertices[b])
    rmse = lambda X: math.sqrt(((X[b] - truth) ** 2).sum(axis=1).mean()) / diag
    assert rmse(out.vertices) < 0.5 * rmse(hm.vertices)
    assert rmse(H.conform_features(out, mesh).vertices) < 0.02
