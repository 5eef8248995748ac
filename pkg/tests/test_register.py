from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

import oracles
from polyhex import geomio as G
from polyhex import register as R


@pytest.fixture(scope="module")
def lshape_cloud():
    mesh, _ = G.synth_pair("lshape")
    p = G.poisson_disk_sample(mesh, 400, seed=0).points
    p = p - p.mean(axis=0)
    return p / np.sqrt((p * p).sum(axis=1).mean())


def _warp(Y):
    return Y + 0.05 * np.sin(3 * Y[:, [1, 2, 0]])


def _rot(seed):
    return Rotation.random(random_state=seed).as_matrix()


# ---------------------------------------------------------------- similarity

def test_rigid_identity(lshape_cloud):
    T = R.rigid_align(lshape_cloud, lshape_cloud)
    assert abs(T.s - 1) < 1e-9
    assert np.max(np.abs(T.R - np.eye(3))) < 1e-9
    assert np.max(np.abs(T.t)) < 1e-9


def test_rigid_recovers_similarity(lshape_cloud):
    Rt, t = _rot(3), np.array([0.4, -2.0, 5.0])
    dst = 1.7 * lshape_cloud @ Rt.T + t
    T = R.rigid_align(lshape_cloud, dst)
    assert abs(T.s - 1.7) < 1e-9
    assert np.max(np.abs(T.R - Rt)) < 1e-9
    assert np.max(np.abs(T.t - t)) < 1e-9
    assert T.rmse < 1e-6


def test_rigid_without_scale(lshape_cloud):
    Rt = _rot(5)
    T = R.rigid_align(lshape_cloud, 2.0 * lshape_cloud @ Rt.T, with_scale=False)
    assert T.s == 1.0


def test_reflection_guard():
    rng = np.random.default_rng(0)
    src = rng.normal(size=(30, 3)) * [3.0, 2.0, 1.0]
    dst = src * [1, 1, -1]  # mirror image: the unconstrained optimum has det -1
    T = R.fit_similarity(src, dst)
    assert abs(np.linalg.det(T.R) - 1) < 1e-9
    assert np.max(np.abs(T.R.T @ T.R - np.eye(3))) < 1e-9
    assert abs(np.linalg.det(R.rigid_align(src, dst).R) - 1) < 1e-9


def test_rigid_left_invariance(lshape_cloud):
    S = R.SimilarityTransform(1.3, _rot(7), [1.0, 2.0, -0.5])
    dst = S.apply(lshape_cloud)
    U = R.SimilarityTransform(0.6, _rot(8), [-3.0, 0.2, 0.9])
    a = R.rigid_align(lshape_cloud, dst)
    b = U.inverse().compose(R.rigid_align(lshape_cloud, U.apply(dst)))
    assert abs(a.s - b.s) < 1e-6
    assert np.max(np.abs(a.R - b.R)) < 1e-6
    assert np.max(np.abs(a.t - b.t)) < 1e-6


def test_rigid_degenerate():
    with pytest.raises(R.RankError):
        R.rigid_align(np.ones((5, 3)), np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(ValueError):
        R.rigid_align(np.zeros((0, 3)), np.zeros((3, 3)))


def test_transform_algebra():
    a = R.SimilarityTransform(2.0, _rot(1), [1, 2, 3])
    b = R.SimilarityTransform(0.5, _rot(2), [0, -1, 4])
    p = np.random.default_rng(0).normal(size=(6, 3))
    assert np.max(np.abs(a.compose(b).apply(p) - a.apply(b.apply(p)))) < 1e-12
    assert np.max(np.abs(a.inverse().apply(a.apply(p)) - p)) < 1e-12
    h = np.c_[p, np.ones(6)] @ a.matrix().T
    assert np.max(np.abs(h[:, :3] - a.apply(p))) < 1e-12


# ---------------------------------------------------------------- CPD

def test_cpd_fixpoint(lshape_cloud):
    out, st = R.cpd_nonrigid(lshape_cloud, lshape_cloud)
    assert np.abs(out - lshape_cloud).mean() < 1e-6
    assert np.abs(st.W).max() < 1e-6


def test_cpd_kernel_properties(lshape_cloud):
    Gk = R.gaussian_kernel(lshape_cloud[:50], 2.0)
    assert np.array_equal(Gk, Gk.T)
    assert np.all(np.diag(Gk) == 1)
    assert np.linalg.eigvalsh(Gk).min() > -1e-10


def test_cpd_warp_recovery_and_monotone(lshape_cloud):
    Y = lshape_cloud
    X = _warp(Y)
    before = cKDTree(X).query(Y)[0].mean()
    out, st = R.cpd_nonrigid(Y, X, track_objective=True)
    after = cKDTree(X).query(out)[0].mean()
    assert after <= 0.1 * before
    assert np.all(np.diff(st.objective) <= 1e-8)
    assert st.sigma2 > 0


def test_cpd_outlier_robustness(lshape_cloud):
    Y = lshape_cloud
    X = _warp(Y)
    gross = np.random.default_rng(1).uniform(-3, 3, size=(len(Y) // 10, 3))
    clean, _ = R.cpd_nonrigid(Y, X, w_out=0.5)
    noisy, _ = R.cpd_nonrigid(Y, np.vstack([X, gross]), w_out=0.5)
    rmse = lambda D: np.sqrt(((D - X) ** 2).sum(axis=1).mean())
    assert rmse(noisy) <= 2 * rmse(clean)


def test_cpd_rejects_bad_parameters(lshape_cloud):
    with pytest.raises(ValueError):
        R.cpd_nonrigid(lshape_cloud, lshape_cloud, w_out=1.0)
    with pytest.raises(ValueError):
        R.cpd_nonrigid(lshape_cloud, lshape_cloud, beta=0)


# ---------------------------------------------------------------- correspondence

def _ori(points):
    n = len(points)
    return G.ConditionCloud(points, np.arange(n), np.tile([1.0, 0.0, 0.0], (n, 1)))


def test_correspondence_identity():
    p = np.random.default_rng(0).normal(size=(40, 3))
    c = R.build_correspondence(p, p, _ori(p))
    assert c.index.tolist() == list(range(40))
    assert np.all(c.residual == 0)
    assert np.array_equal(c.face_id, np.arange(40))


def test_correspondence_tie_lowest_index():
    ori = _ori(np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 5, 0]]))
    c = R.build_correspondence(np.zeros((1, 3)), np.zeros((1, 3)), ori)
    assert c.index.tolist() == [0]
    ori = _ori(np.array([[0, 5, 0], [-1.0, 0, 0], [1.0, 0, 0]]))
    assert R.build_correspondence(np.zeros((1, 3)), np.zeros((1, 3)), ori).index.tolist() == [1]


@pytest.mark.parametrize("seed", range(4))
def test_correspondence_brute_force(seed):
    rng = np.random.default_rng(seed)
    if seed % 2:
        q, r = rng.integers(0, 5, size=(256, 3)) * 0.5, rng.integers(0, 5, size=(200, 3)) * 0.5
    else:
        q, r = rng.normal(size=(256, 3)), rng.normal(size=(256, 3))
    idx, dist = R.nearest_index(q, r)
    assert idx.tolist() == oracles.brute_nearest(q.tolist(), r.tolist())
    assert np.all(dist >= 0)


def test_correspondence_errors():
    with pytest.raises(ValueError):
        R.build_correspondence(np.zeros((1, 3)), np.zeros((1, 3)), _ori(np.zeros((0, 3))))


def test_correspondence_file_round_trip(tmp_path):
    p = np.random.default_rng(0).normal(size=(10, 3))
    ori = G.ConditionCloud(p, np.arange(10) * 3, np.random.default_rng(1).dirichlet([1, 1, 1], 10))
    c = R.build_correspondence(p, p + 0.01, ori)
    R.save_correspondence(tmp_path / "c.txt", c)
    back = R.load_correspondence(tmp_path / "c.txt")
    assert np.array_equal(back.index, c.index) and np.array_equal(back.face_id, c.face_id)
    assert np.array_equal(back.bary, c.bary) and np.array_equal(back.residual, c.residual)
