"""Similarity ICP, Coherent Point Drift and nearest-neighbor correspondence.

The polycube cloud is moved toward the sampled input surface: a similarity
transform first, then a CPD displacement field ``T(Y) = Y + G W``. Each
deformed polycube point finally inherits the (face, barycentric) anchor of
its nearest surface sample.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial import cKDTree

from .errors import DataError, ValidityError
from .geomio import ConditionCloud


class RankError(ValidityError, ValueError):
    """Point set too degenerate to define a transform."""


# ---------------------------------------------------------------- similarity

@dataclass
class SimilarityTransform:
    s: float = 1.0
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rmse: float = float("nan")

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if not self.s > 0:
            raise ValueError(f"scale must be positive, got {self.s}")

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.s * np.asarray(p, dtype=np.float64) @ self.R.T + self.t

    __call__ = apply

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """``self`` after ``other``."""
        return SimilarityTransform(self.s * other.s, self.R @ other.R,
                                   self.s * self.R @ other.t + self.t)

    def inverse(self) -> "SimilarityTransform":
        return SimilarityTransform(1.0 / self.s, self.R.T, -(self.R.T @ self.t) / self.s)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.s * self.R
        m[:3, 3] = self.t
        return m


def fit_similarity(src: np.ndarray, dst: np.ndarray, with_scale: bool = True,
                   weights: np.ndarray | None = None) -> SimilarityTransform:
    """Closed-form least-squares similarity from paired points (Umeyama).

    The SVD of the cross-covariance gives the rotation; when its determinant
    is negative the sign of the weakest singular direction is flipped so the
    result is a proper rotation.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    a = src - mu_s
    b = dst - mu_d
    var_s = float(w @ (a * a).sum(axis=1))
    if var_s <= 1e-300:
        raise RankError("source points are all identical")
    cov = (b * w[:, None]).T @ a
    U, S, Vt = np.linalg.svd(cov)
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = (U * D) @ Vt
    s = float((S * D).sum() / var_s) if with_scale else 1.0
    if not s > 0:
        raise RankError("degenerate correspondence, non-positive scale")
    return SimilarityTransform(s, R, mu_d - s * R @ mu_s)


def _rms_radius(p: np.ndarray) -> float:
    c = p - p.mean(axis=0)
    return math.sqrt(float((c * c).sum(axis=1).mean()))


def _principal_axes(p: np.ndarray) -> np.ndarray:
    c = p - p.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    return vecs[:, ::-1]


def _initial_guesses(src, dst, with_scale):
    """Centroid + RMS-radius start, the same with principal-axis rotations, and
    the index-paired fit when both clouds have equal size."""
    rs, rd = _rms_radius(src), _rms_radius(dst)
    if rs <= 1e-300:
        raise RankError("source points are all identical")
    s = rd / rs if with_scale and rd > 0 else 1.0
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    out = [SimilarityTransform(s, np.eye(3), cd - s * cs)]
    As, Ad = _principal_axes(src), _principal_axes(dst)
    for signs in itertools.product((1.0, -1.0), repeat=3):
        R = (Ad * np.array(signs)) @ As.T
        if np.linalg.det(R) < 0:
            continue
        out.append(SimilarityTransform(s, R, cd - s * R @ cs))
    if len(src) == len(dst):
        try:
            out.append(fit_similarity(src, dst, with_scale))
        except RankError:
            pass
    return out


def _icp(src, dst, tree, T, iters, with_scale, tol=1e-14):
    err = np.inf
    for _ in range(iters):
        d, j = tree.query(T.apply(src))
        e = math.sqrt(float((d * d).mean()))
        if err - e <= tol * max(err, 1.0):
            break
        err = e
        T = fit_similarity(src, dst[j], with_scale)
    d, _ = tree.query(T.apply(src))
    T.rmse = math.sqrt(float((d * d).mean()))
    return T


def rigid_align(src: np.ndarray, dst: np.ndarray, icp_iters: int = 50,
                with_scale: bool = True) -> SimilarityTransform:
    """Similarity transform taking ``src`` onto ``dst`` by multi-start ICP.

    Every start runs up to ``icp_iters`` rounds of nearest-neighbor matching
    and closed-form refit; the result with the lowest final RMSE is
    returned, earliest start winning ties.
    """
    src = np.asarray(src, dtype=np.float64)[:, :3]
    dst = np.asarray(dst, dtype=np.float64)[:, :3]
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("rigid_align needs two nonempty clouds")
    tree = cKDTree(dst)
    best = None
    for T0 in _initial_guesses(src, dst, with_scale):
        T = _icp(src, dst, tree, T0, icp_iters, with_scale)
        if best is None or T.rmse < best.rmse:
            best = T
    return best


# ---------------------------------------------------------------- CPD

@dataclass
class CpdState:
    beta: float
    lam: float
    w_out: float
    W: np.ndarray
    sigma2: float
    G: np.ndarray
    objective: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def gaussian_kernel(Y: np.ndarray, beta: float) -> np.ndarray:
    sq = (Y * Y).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.exp(-d2 / (2.0 * beta * beta))


def _normalize(p):
    mu = p.mean(axis=0)
    c = p - mu
    r = math.sqrt(float((c * c).sum(axis=1).mean()))
    if r <= 1e-300:
        raise RankError("cloud has zero extent")
    return c / r, mu, r


def _sqdist(X, T):
    """``[M, N]`` squared distances from exact coordinate differences.

    The expanded |x|^2 + |t|^2 - 2 x.t form cancels badly once sigma2 is
    tiny near convergence.
    """
    d2 = np.zeros((len(T), len(X)))
    for k in range(X.shape[1]):
        diff = T[:, k, None] - X[None, :, k]
        diff *= diff
        d2 += diff
    return d2


def _mixture(d2, sigma2, w, M, N, D):
    """Log Gaussian weights and per-target log normalizers of the mixture."""
    logk = d2 / (-2.0 * sigma2)
    top = logk.max(axis=0)
    log_c = None
    if w > 0:
        # the uniform component, on the same exp scale as the Gaussians
        log_c = 0.5 * D * math.log(2.0 * math.pi * sigma2) + math.log(w / (1.0 - w) * M / N)
        top = np.maximum(top, log_c)
    acc = np.exp(logk - top).sum(axis=0)
    if log_c is not None:
        acc += np.exp(log_c - top)
    return logk, top + np.log(acc)


def _objective(X, Y, G, W, sigma2, w, lam):
    """Penalized NLL evaluated in extended precision.

    ``G W`` can involve coefficients of order 1e4 against a kernel with
    condition number near 1e11, so a float64 evaluation carries noise far
    above the per-iteration decrease once the fit is tight.
    """
    ld = np.longdouble
    M, D = Y.shape
    N = len(X)
    Gl, Wl = G.astype(ld), W.astype(ld)
    GW = Gl @ Wl
    T = Y.astype(ld) + GW
    Xl = X.astype(ld)
    d2 = np.zeros((M, N), ld)
    for k in range(D):
        diff = T[:, k, None] - Xl[None, :, k]
        d2 += diff * diff
    s2 = ld(sigma2)
    logk = d2 / (-2 * s2)
    log_norm = ld(D) / 2 * np.log(2 * ld(np.pi) * s2)
    top = logk.max(axis=0)
    acc = np.exp(logk - top).sum(axis=0)
    if w > 0:
        log_c = log_norm + np.log(ld(w) / (1 - ld(w)) * M / N)
        acc += np.exp(log_c - top)
    lse = top + np.log(acc)
    nll = -(lse - log_norm + np.log((1 - ld(w)) / M)).sum()
    return float(nll + ld(lam) / 2 * (Wl * GW).sum())


def cpd_nonrigid(src: np.ndarray, dst: np.ndarray, beta: float = 2.0, lam: float = 3.0,
                 w_out: float = 0.1, max_iters: int = 50, tol: float = 1e-5,
                 track_objective: bool = False) -> tuple[np.ndarray, CpdState]:
    """Coherent Point Drift moving ``src`` (M x 3) toward ``dst`` (N x 3).

    Both clouds are normalized to zero mean and unit RMS radius; the
    deformed source is returned in ``dst``'s frame. With ``track_objective``
    ``state.objective`` holds the penalized negative log-likelihood
    ``-sum_n log p(x_n) + lam/2 tr(W^T G W)`` before the first and after
    every EM iteration.
    """
    if not 0.0 <= w_out < 1.0:
        raise ValueError(f"w_out must lie in [0, 1), got {w_out}")
    if beta <= 0 or lam <= 0:
        raise ValueError("beta and lambda must be positive")
    Yn, _, _ = _normalize(np.asarray(src, dtype=np.float64)[:, :3])
    Xn, mu_x, r_x = _normalize(np.asarray(dst, dtype=np.float64)[:, :3])
    M, D = Yn.shape
    N = len(Xn)
    G = gaussian_kernel(Yn, beta)
    W = np.zeros((M, D))
    T = Yn.copy()
    d2 = _sqdist(Xn, T)
    sigma2 = float(d2.sum()) / (D * M * N)
    state = CpdState(beta, lam, w_out, W, sigma2, G)
    if sigma2 < 1e-12:
        state.converged = True
        return T * r_x + mu_x, state
    logk, lse = _mixture(d2, sigma2, w_out, M, N, D)
    if track_objective:
        state.objective.append(_objective(Xn, Yn, G, W, sigma2, w_out, lam))
    for it in range(max_iters):
        P = np.exp(logk - lse[None, :])
        P1 = P.sum(axis=1)
        Np = float(P1.sum())
        # (diag(P1) G + lam sigma2 I) W = B, solved in the symmetric form
        # (G + lam sigma2 diag(1/P1)) W = diag(1/P1) B
        inv = 1.0 / np.maximum(P1, 1e-300)
        B = (P @ Xn - P1[:, None] * Yn) * inv[:, None]
        A = G.copy()
        A[np.diag_indices(M)] += lam * sigma2 * inv
        cf = cho_factor(A, check_finite=False)
        W = cho_solve(cf, B, check_finite=False)
        # one refinement pass; A is badly conditioned once sigma2 is small
        W += cho_solve(cf, B - A @ W, check_finite=False)
        T = Yn + G @ W
        d2 = _sqdist(Xn, T)
        old = sigma2
        sigma2 = float((P * d2).sum()) / (Np * D)
        state.iterations = it + 1
        if not sigma2 >= 1e-12:
            sigma2 = max(sigma2, 1e-12)
            state.converged = True
        logk, lse = _mixture(d2, sigma2, w_out, M, N, D)
        if track_objective:
            state.objective.append(_objective(Xn, Yn, G, W, sigma2, w_out, lam))
        if state.converged:
            break
        if abs(old - sigma2) / old < tol:
            state.converged = True
            break
    state.W, state.sigma2 = W, sigma2
    return T * r_x + mu_x, state


# ---------------------------------------------------------------- correspondence

@dataclass
class CorrespondenceMap:
    index: np.ndarray
    face_id: np.ndarray
    bary: np.ndarray
    residual: np.ndarray

    def __len__(self):
        return len(self.index)


def nearest_index(query: np.ndarray, ref: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact Euclidean nearest neighbor; the lowest reference index wins ties."""
    query = np.asarray(query, dtype=np.float64)[:, :3]
    ref = np.asarray(ref, dtype=np.float64)[:, :3]
    if len(ref) == 0:
        raise ValueError("reference cloud is empty")
    tree = cKDTree(ref)
    d0, _ = tree.query(query)
    idx = np.empty(len(query), np.int64)
    dist = np.empty(len(query))
    balls = tree.query_ball_point(query, d0 * (1.0 + 1e-9) + 1e-300)
    for q, cand in enumerate(balls):
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        diff = ref[cand] - query[q]
        dd = np.sqrt((diff * diff).sum(axis=1))
        k = int(np.argmin(dd))
        idx[q], dist[q] = cand[k], dd[k]
    return idx, dist


def build_correspondence(poly, deformed_poly: np.ndarray, ori: ConditionCloud) -> CorrespondenceMap:
    """Anchor each deformed polycube point at its nearest input-surface sample.

    ``poly`` is the undeformed cloud; it only fixes the expected length.
    """
    if len(ori) == 0:
        raise ValueError("original cloud is empty")
    if len(poly) != len(deformed_poly):
        raise ValueError("deformed cloud does not match the polycube cloud")
    idx, dist = nearest_index(deformed_poly, ori.points)
    return CorrespondenceMap(idx, ori.face_id[idx], ori.bary[idx], dist)


def save_correspondence(path, corr: CorrespondenceMap) -> None:
    with open(path, "w") as fh:
        fh.write("# index face_id b0 b1 b2 residual\n")
        for i, f, b, r in zip(corr.index, corr.face_id, corr.bary, corr.residual):
            fh.write(f"{int(i)} {int(f)} {b[0]:.17g} {b[1]:.17g} {b[2]:.17g} {r:.17g}\n")


def load_correspondence(path) -> CorrespondenceMap:
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 6:
                raise DataError("expected 6 columns", path, ln)
            rows.append([float(x) for x in parts])
    a = np.array(rows).reshape(-1, 6)
    return CorrespondenceMap(a[:, 0].astype(np.int64), a[:, 1].astype(np.int64), a[:, 2:5], a[:, 5])
