"""Exact nearest-neighbor search over a regular voxel hash."""

from __future__ import annotations

import numpy as np

_OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


def median_nn_spacing(points: np.ndarray, sample: int = 256) -> float:
    """Median nearest-neighbor distance, estimated on an evenly spaced subset."""
    pts = np.asarray(points, dtype=float)
    idx = np.linspace(0, len(pts) - 1, min(sample, len(pts))).astype(int)
    q = pts[idx]
    d2 = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(-1)
    d2[np.arange(len(idx)), idx] = np.inf
    return float(np.sqrt(np.median(d2.min(axis=1))))


class VoxelHashIndex:
    """Immutable voxel hash over a fixed point set.

    A query first scans the 3×3×3 block of cells around it.  The best hit is
    exact whenever its distance is at most the cell size, because anything
    outside the block is farther than that; other queries fall back to brute
    force.
    """

    def __init__(self, points: np.ndarray, cell_size: float | None = None):
        pts = np.array(points, dtype=float).reshape(-1, 3)
        if len(pts) == 0:
            raise ValueError("index needs at least one point")
        if cell_size is None:
            cell_size = 2.0 * median_nn_spacing(pts) if len(pts) > 1 else 1.0
        self.cell = float(max(cell_size, 1e-9))
        self.points = pts
        self.lo = pts.min(axis=0)
        ijk = self._cells(pts)
        # two-cell margin so neighbor keys of in-range queries never wrap
        self.dims = ijk.max(axis=0) + 3
        keys = self._keys(ijk)
        order = np.argsort(keys, kind="stable")
        self.order = order
        sorted_keys = keys[order]
        self.ukeys, self.starts, self.counts = np.unique(sorted_keys, return_index=True, return_counts=True)
        self.max_count = int(self.counts.max())
        self._sq_norms = np.einsum("ij,ij->i", pts, pts)

    def _cells(self, pts):
        return np.floor((pts - self.lo) / self.cell).astype(np.int64) + 1

    def _keys(self, ijk):
        return (ijk[..., 0] * self.dims[1] + ijk[..., 1]) * self.dims[2] + ijk[..., 2]

    def query(self, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nearest neighbor (distance, index) for each query point."""
        q = np.asarray(queries, dtype=float).reshape(-1, 3)
        m = len(q)
        best_d2 = np.full(m, np.inf)
        best_i = np.zeros(m, dtype=np.int64)

        ijk = self._cells(q)
        in_range = np.all((ijk >= 1) & (ijk <= self.dims - 2), axis=1)
        rows = np.flatnonzero(in_range)
        if len(rows):
            nb = ijk[rows, None, :] + _OFFSETS[None, :, :]  # (r, 27, 3)
            keys = self._keys(nb)
            pos = np.searchsorted(self.ukeys, keys)
            pos = np.minimum(pos, len(self.ukeys) - 1)
            hit = self.ukeys[pos] == keys
            start = np.where(hit, self.starts[pos], 0).ravel()
            count = np.where(hit, self.counts[pos], 0).ravel()
            total = int(count.sum())
            if total:
                # flat candidate list: cell members laid out row by row
                seg = np.repeat(np.arange(len(count)), count)
                within = np.arange(total) - np.repeat(np.cumsum(count) - count, count)
                cand = self.order[start[seg] + within]
                qrow = seg // 27
                diff = self.points[cand] - q[rows[qrow]]
                d2 = np.einsum("ij,ij->i", diff, diff)
                # qrow is nondecreasing, so each query row is one contiguous segment
                row_tot = count.reshape(-1, 27).sum(axis=1)
                row_tot = row_tot[row_tot > 0]
                seg_start = np.cumsum(row_tot) - row_tot
                mins = np.minimum.reduceat(d2, seg_start)
                pick = np.flatnonzero(d2 == np.repeat(mins, row_tot))
                first = np.ones(len(pick), dtype=bool)
                first[1:] = qrow[pick][1:] != qrow[pick][:-1]
                pick = pick[first]
                r = rows[qrow[pick]]
                best_d2[r] = d2[pick]
                best_i[r] = cand[pick]

        miss = np.flatnonzero(~(best_d2 <= self.cell * self.cell))
        if len(miss):
            d, j = brute_force_nn(self.points, q[miss], self._sq_norms)
            best_d2[miss] = d * d
            best_i[miss] = j
        return np.sqrt(best_d2), best_i


def brute_force_nn(points: np.ndarray, queries: np.ndarray,
                   sq_norms: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exhaustive nearest neighbor; candidates ranked via the Gram expansion,
    winner distances recomputed directly."""
    points = np.asarray(points, dtype=float)
    queries = np.asarray(queries, dtype=float)
    if sq_norms is None:
        sq_norms = np.einsum("ij,ij->i", points, points)
    score = sq_norms[None, :] - 2.0 * queries @ points.T
    j = np.argmin(score, axis=1)
    d = np.linalg.norm(points[j] - queries, axis=1)
    return d, j
