"""Two-phase outlier removal for generated polycube clouds.

Phase I drops points with no other point strictly within L1 distance
``tau``. Phase II ranks the survivors by their nearest-neighbor L1
distance and prunes the ``K`` largest; on equal distances the higher
original index goes first. Only the first three channels enter distances,
any further channels (normals) ride along untouched.

Every point that survives Phase I has a neighbor closer than ``tau``, and
that neighbor also survives, so the Phase II distance computed over
neighbors within ``tau`` equals the global nearest-neighbor distance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .spatial import HashGrid, pair_distance

# grid cells are padded slightly so float rounding in floor(p / cell) cannot
# push a true neighbor two cells away
_CELL_PAD = 1.0 + 1e-9


@dataclass(frozen=True)
class FilterConfig:
    tau: float
    K: int

    def __post_init__(self):
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")


@dataclass
class FilterResult:
    points: np.ndarray
    kept: np.ndarray  # indices into the input cloud
    removed_phase1: int
    removed_phase2: int


def default_prune_count(m: int) -> int:
    return math.ceil(0.002 * m)


def _positions(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[1] < 3:
        raise ValueError(f"cloud must be (n, >=3), got {P.shape}")
    return P[:, :3]


def phase1_mask(P: np.ndarray, tau: float) -> np.ndarray:
    """True for points with at least one other point at L1 distance < tau."""
    X = _positions(P)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if len(X) == 0:
        return np.zeros(0, bool)
    i, _, _ = HashGrid(X, tau * _CELL_PAD).pairs_within(tau, "l1", strict=True)
    keep = np.zeros(len(X), bool)
    keep[i] = True
    return keep


def phase1_connectivity(P: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Retained cloud and the retained indices, in input order."""
    keep = np.nonzero(phase1_mask(P, tau))[0]
    return np.asarray(P)[keep], keep


def nearest_l1(P: np.ndarray, tau: float | None = None) -> np.ndarray:
    """Exact L1 distance from each point to its nearest other point.

    Uses the tau grid where it finds a neighbor and a k-d tree candidate
    search with exact re-evaluation elsewhere; both use the same distance
    expression as a dense scan.
    """
    X = _positions(P)
    n = len(X)
    if n < 2:
        raise ValueError("nearest-neighbor distance needs at least two points")
    d = np.full(n, np.inf)
    if tau is not None:
        i, _, dist = HashGrid(X, tau * _CELL_PAD).pairs_within(tau, "l1", strict=True)
        np.minimum.at(d, i, dist)
    todo = np.nonzero(~np.isfinite(d))[0]
    if len(todo):
        tree = cKDTree(X)
        ub, _ = tree.query(X[todo], k=2, p=1)
        # re-evaluate every candidate inside a slightly inflated ball
        for q, r in zip(todo, ub[:, 1] * (1.0 + 1e-9) + 1e-300):
            cand = np.asarray(tree.query_ball_point(X[q], r, p=1), dtype=np.int64)
            cand = cand[cand != q]
            d[q] = pair_distance(X[cand], X[q], "l1").min()
    return d


def phase2_density(P: np.ndarray, K: int, tau: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Remove the K points with the largest nearest-neighbor distance.

    Returns the retained cloud and retained indices (input order).
    """
    P = np.asarray(P)
    n = len(P)
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    if K == 0:
        return P, np.arange(n)
    if K >= n:
        raise ValueError(f"cannot prune K={K} of {n} points")
    d = nearest_l1(P, tau)
    order = np.lexsort((np.arange(n), d))
    keep = np.sort(order[: n - K])
    return P[keep], keep


def auto_tau(P: np.ndarray) -> float:
    """2.5 times the median nearest-neighbor L1 distance."""
    return 2.5 * float(np.median(nearest_l1(P)))


def clean(P: np.ndarray, cfg: FilterConfig) -> FilterResult:
    P = np.asarray(P)
    p1, k1 = phase1_connectivity(P, cfg.tau)
    p2, k2 = phase2_density(p1, cfg.K, cfg.tau)
    return FilterResult(p2, k1[k2], len(P) - len(p1), len(p1) - len(p2))
