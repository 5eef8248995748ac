"""Uniform hash grid for fixed-radius neighbor queries.

Cells have the query radius as edge length, so every neighbor of a point
lies in the 27 cells around it (true for both the L1 and L2 balls). Pair
generation is vectorized: points are sorted by cell code and all pairs
between a cell and one neighboring cell are expanded with ``np.repeat``.
Distances use the same elementwise expression as a dense brute-force
scan, so results are bit-identical to it.
"""

from __future__ import annotations

import itertools

import numpy as np

_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.int64)


def pair_distance(a: np.ndarray, b: np.ndarray, metric: str) -> np.ndarray:
    diff = a - b
    if metric == "l1":
        return np.abs(diff).sum(axis=-1)
    if metric == "l2":
        return np.sqrt((diff * diff).sum(axis=-1))
    raise ValueError(f"unknown metric {metric!r}")


class HashGrid:
    def __init__(self, points: np.ndarray, cell: float):
        if cell <= 0 or not np.isfinite(cell):
            raise ValueError(f"cell size must be positive, got {cell}")
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        self.cell = float(cell)
        keys = np.floor(self.points / self.cell).astype(np.int64) if len(self.points) else np.zeros((0, 3), np.int64)
        self._lo = keys.min(axis=0) - 1 if len(keys) else np.zeros(3, np.int64)
        span = (keys.max(axis=0) + 2 - self._lo) if len(keys) else np.ones(3, np.int64)
        self._dims = span + 1
        codes = self._encode(keys)
        self.order = np.argsort(codes, kind="stable")
        sorted_codes = codes[self.order]
        self.cell_codes, self.cell_start, self.cell_count = np.unique(
            sorted_codes, return_index=True, return_counts=True)
        self.cell_keys = keys[self.order[self.cell_start]] if len(keys) else keys

    def _encode(self, keys: np.ndarray) -> np.ndarray:
        k = keys - self._lo
        return (k[:, 0] * self._dims[1] + k[:, 1]) * self._dims[2] + k[:, 2]

    def candidate_pairs(self):
        """Yield (i, j) index arrays, one batch per neighbor offset; i != j, both orders."""
        if len(self.cell_codes) == 0:
            return
        for off in _OFFSETS:
            nkeys = self.cell_keys + off
            ncodes = self._encode(nkeys)
            pos = np.searchsorted(self.cell_codes, ncodes)
            pos_c = np.minimum(pos, len(self.cell_codes) - 1)
            hit = (pos < len(self.cell_codes)) & (self.cell_codes[pos_c] == ncodes)
            a = np.nonzero(hit)[0]
            b = pos_c[hit]
            if len(a) == 0:
                continue
            na = self.cell_count[a]
            nb = self.cell_count[b]
            sizes = na * nb
            total = int(sizes.sum())
            owner = np.repeat(np.arange(len(a)), sizes)
            local = np.arange(total) - np.repeat(np.cumsum(sizes) - sizes, sizes)
            ia = self.cell_start[a][owner] + local // nb[owner]
            ib = self.cell_start[b][owner] + local % nb[owner]
            i = self.order[ia]
            j = self.order[ib]
            keep = i != j
            yield i[keep], j[keep]

    def pairs_within(self, radius: float | None = None, metric: str = "l1",
                     strict: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All ordered pairs (i, j), i != j, with distance < radius (<= if not strict)."""
        r = self.cell if radius is None else radius
        if r > self.cell:
            raise ValueError("radius larger than the grid cell")
        out_i, out_j, out_d = [], [], []
        for i, j in self.candidate_pairs():
            d = pair_distance(self.points[i], self.points[j], metric)
            m = d < r if strict else d <= r
            out_i.append(i[m])
            out_j.append(j[m])
            out_d.append(d[m])
        if not out_i:
            e = np.zeros(0, np.int64)
            return e, e, np.zeros(0)
        return np.concatenate(out_i), np.concatenate(out_j), np.concatenate(out_d)


def neighbor_counts(points: np.ndarray, radius: float, metric: str = "l1") -> np.ndarray:
    """Number of other points strictly within ``radius`` of each point."""
    i, _, _ = HashGrid(points, radius).pairs_within(radius, metric)
    return np.bincount(i, minlength=len(points))


def nearest_within(points: np.ndarray, radius: float, metric: str = "l1") -> np.ndarray:
    """Distance to the nearest other point if closer than ``radius``, else inf."""
    i, _, d = HashGrid(points, radius).pairs_within(radius, metric)
    out = np.full(len(points), np.inf)
    np.minimum.at(out, i, d)
    return out
