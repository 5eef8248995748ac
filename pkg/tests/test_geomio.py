from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.distance import pdist

import oracles
from polyhex import geomio as G
from polyhex.errors import DataError

CUBE_OBJ = """\
v 0 0 0
v 1 0 0
v 1 1 0
v 0 1 0
v 0 0 1
v 1 0 1
v 1 1 1
v 0 1 1
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


@pytest.fixture
def cube(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    return G.load_mesh(p)


# ---------------------------------------------------------------- OBJ

def test_obj_round_trip(cube, tmp_path):
    assert cube.vertices.shape == (8, 3) and cube.faces.shape == (12, 3)
    G.save_mesh(cube, tmp_path / "out.obj")
    back = G.load_mesh(tmp_path / "out.obj")
    assert np.max(np.abs(back.vertices - cube.vertices)) < 1e-9
    assert np.array_equal(back.faces, cube.faces)
    assert abs(cube.total_area - 6.0) < 1e-12


def test_obj_quad_fan(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = G.load_mesh(p)
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_obj_index_zero_is_error(tmp_path):
    p = tmp_path / "z.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n")
    with pytest.raises(DataError) as e:
        G.load_mesh(p)
    assert e.value.line == 4


def test_obj_malformed_line_number(tmp_path):
    p = tmp_path / "m.obj"
    p.write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(DataError) as e:
        G.load_mesh(p)
    assert e.value.line == 2


def test_obj_nonmanifold_warns(tmp_path):
    p = tmp_path / "n.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 -1 0\nv 0 0 1\n"
                 "f 1 2 3\nf 2 1 4\nf 1 2 5\n")
    with pytest.warns(UserWarning, match="non-manifold"):
        m = G.load_mesh(p)
    assert m.nonmanifold


def test_degenerate_face_rejected():
    with pytest.raises(DataError):
        G.TriMesh([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


# ---------------------------------------------------------------- sampling

def test_poisson_single_point(cube):
    c = G.poisson_disk_sample(cube, 1, seed=0)
    assert len(c) == 1
    assert np.max(np.abs(cube.evaluate(c.face_id, c.bary) - c.points)) < 1e-9
    assert np.all(c.bary >= 0) and abs(c.bary.sum() - 1) < 1e-9


def test_poisson_min_distance_and_count(cube):
    c = G.poisson_disk_sample(cube, 1024, seed=3)
    assert len(c) == 1024
    r = 0.85 * math.sqrt(6.0 / 1024)
    assert abs(c.radius - r) < 1e-15
    accepted = c.points[~c.compensated]
    assert len(accepted) > 1
    assert pdist(accepted).min() >= r


def test_poisson_deterministic(cube):
    a = G.poisson_disk_sample(cube, 300, seed=7)
    b = G.poisson_disk_sample(cube, 300, seed=7)
    assert a.points.tobytes() == b.points.tobytes()
    assert np.array_equal(a.face_id, b.face_id)


def test_poisson_provenance_exact(cube):
    c = G.poisson_disk_sample(cube, 500, seed=1)
    assert np.max(np.abs(cube.evaluate(c.face_id, c.bary) - c.points)) < 1e-9
    assert np.all(c.bary >= 0)
    assert np.max(np.abs(c.bary.sum(axis=1) - 1)) < 1e-9


def test_poisson_compensation_tops_up(cube):
    # with a single candidate per target the radius rejects some darts
    c = G.poisson_disk_sample(cube, 400, seed=0, budget=1)
    assert len(c) == 400 and c.compensated.any()
    assert not c.compensated[:np.argmax(c.compensated)].any()


def test_poisson_errors(cube):
    with pytest.raises(ValueError):
        G.poisson_disk_sample(cube, 0)
    with pytest.raises(ValueError):
        G.poisson_disk_sample(G.TriMesh(np.zeros((0, 3)), np.zeros((0, 3))), 4)


def test_area_weighted_fairness():
    # two triangles with areas 1.5 and 0.5
    m = G.TriMesh([[0, 0, 0], [3, 0, 0], [0, 1, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]],
                  [[0, 1, 2], [3, 4, 5]])
    n = 100_000
    fid, _ = G.random_surface_points(m, n, np.random.default_rng(0))
    hits = int((fid == 0).sum())
    assert abs(hits - 0.75 * n) < 3 * math.sqrt(n * 0.75 * 0.25)


# ---------------------------------------------------------------- pcd

def test_pcd_empty_round_trip(tmp_path):
    G.save_cloud(tmp_path / "e.pcd", np.zeros((0, 3)))
    assert (tmp_path / "e.pcd").read_text() == "pcd 0 3\n"
    assert G.load_cloud(tmp_path / "e.pcd").shape == (0, 3)


def test_pcd_six_channel_round_trip(tmp_path):
    d = np.random.default_rng(0).normal(size=(20, 6))
    G.save_cloud(tmp_path / "c.pcd", d)
    assert np.max(np.abs(G.load_cloud(tmp_path / "c.pcd") - d)) < 1e-9


def test_pcd_count_mismatch(tmp_path):
    p = tmp_path / "bad.pcd"
    p.write_text("pcd 5 3\n" + "0 0 0\n" * 4)
    with pytest.raises(DataError, match="5 points"):
        G.load_cloud(p)


def test_pcd_rejects_bad_channels(tmp_path):
    with pytest.raises(DataError):
        G.save_cloud(tmp_path / "x.pcd", np.zeros((2, 4)))
    p = tmp_path / "y.pcd"
    p.write_text("pcd 1 4\n0 0 0 0\n")
    with pytest.raises(DataError):
        G.load_cloud(p)


def test_provenance_round_trip(cube, tmp_path):
    c = G.poisson_disk_sample(cube, 50, seed=2, budget=1)
    G.save_provenance(tmp_path / "c.prov", c)
    back = G.load_provenance(tmp_path / "c.prov", c.points)
    assert np.array_equal(back.face_id, c.face_id)
    assert np.array_equal(back.bary, c.bary)
    assert np.array_equal(back.compensated, c.compensated)


# ---------------------------------------------------------------- synthetic pairs

def test_synth_unit_box_identity():
    mesh, poly = G.synth_pair({"preset": "cube", "points": 400}, 0)
    p, n = poly.points, poly.normals
    on_face = np.min(np.minimum(np.abs(p), np.abs(p - 1)), axis=1)
    assert np.max(on_face) < 1e-12
    assert np.all((p >= -1e-12) & (p <= 1 + 1e-12))
    axes = np.vstack([np.eye(3), -np.eye(3)])
    assert all(np.any(np.all(np.abs(axes - v) < 1e-15, axis=1)) for v in n)
    # outward: the normal points away from the cube center
    assert np.all(((p - 0.5) * n).sum(axis=1) > 0)
    assert mesh.vertices.min() == 0 and mesh.vertices.max() == 1
    assert abs(mesh.total_area - 6) < 1e-12


def test_synth_bar_genus_zero():
    spec = G.ShapeSpec.parse("bar")
    vox = spec.voxels()
    assert len(vox) == 2
    assert oracles.voxel_euler(vox.tolist()) == 2
    _, poly = G.synth_pair("bar", 1)
    assert poly.points[:, 0].max() <= 2 + 1e-12


def test_synth_frame_genus_one():
    vox = G.ShapeSpec.parse("frame").voxels()
    assert len(vox) == 8
    assert oracles.voxel_euler(vox.tolist()) == 0


def test_synth_warp_is_applied():
    spec = {"preset": "cube", "warp": {"amplitude": 0.1, "frequency": 2.0}, "rotation": [0, 0, 30]}
    mesh, _ = G.synth_pair(spec, 0)
    s = G.ShapeSpec.parse(spec)
    base = G.box_union_mesh(s.voxels(), s.subdiv)
    assert np.max(np.abs(mesh.vertices - s.deform(base.vertices))) == 0
    assert np.max(np.abs(mesh.vertices - base.vertices)) > 0.05


def test_synth_deterministic():
    a = G.synth_pair("lshape", 4)[1].data
    b = G.synth_pair("lshape", 4)[1].data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("spec", [
    {"boxes": [{"origin": [0.5, 0, 0], "size": [1, 1, 1]}]},
    {"boxes": [{"origin": [0, 0, 0], "size": [1.5, 1, 1]}]},
    {"boxes": [{"origin": [0, 0, 0], "size": [0, 1, 1]}]},
    {"boxes": []},
    {"boxes": [{"size": [1, 1, 1]}], "warp": {"amplitude": 1.0, "frequency": 1.0}},
    {"boxes": [{"size": [1, 1, 1]}], "colour": "red"},
])
def test_synth_spec_errors(spec):
    with pytest.raises(G.SpecError):
        G.synth_pair(spec, 0)
