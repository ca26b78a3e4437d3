"""Point clouds and their image-grid representations.

Maps are orthographic projections along z.  Pixel ``(row, col)`` covers
``x ∈ [ox + (col - R/2)·s, ox + (col - R/2 + 1)·s)`` and likewise for ``y``
with ``row``, where ``R`` is the resolution, ``s`` the mm-per-pixel scale and
``(ox, oy)`` the origin.  Masked pixels hold 0; read the mask, not the fill.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay, QhullError, cKDTree

from .errors import BadFactor, EmptyCloud

DEFAULT_RESOLUTION = 256
DEFAULT_SCALE = 0.9  # mm/px: a 180 mm face spans ~200 px at 256
IDW_NEIGHBORS = 4
GAP_LIMIT_PX = 6.0


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    id: Optional[str] = None
    frame_index: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points)

    @property
    def centroid(self) -> np.ndarray:
        if len(self) == 0:
            raise EmptyCloud("centroid of an empty cloud")
        return self.points.mean(axis=0)


@dataclass(frozen=True, eq=False)
class CoordinateMap:
    """H×W×3 grid of X, Y, Z (mm) plus a validity mask."""

    xyz: np.ndarray  # (R, R, 3)
    mask: np.ndarray  # (R, R) bool
    scale: float
    origin: np.ndarray  # (2,) mm

    @property
    def resolution(self) -> int:
        return self.xyz.shape[0]

    width = height = resolution

    def valid_fraction(self) -> float:
        return float(self.mask.mean())


@dataclass(frozen=True, eq=False)
class DepthMap:
    depth: np.ndarray  # (R, R)
    mask: np.ndarray
    scale: float
    origin: np.ndarray

    @property
    def resolution(self) -> int:
        return self.depth.shape[0]

    width = height = resolution


def pixel_coords(points_xy: np.ndarray, resolution: int, scale: float, origin: np.ndarray) -> np.ndarray:
    """Integer (row, col) for each xy point; may fall outside the grid."""
    rel = (np.asarray(points_xy, dtype=float) - origin) / scale + resolution / 2.0
    cols = np.floor(rel[:, 0]).astype(np.int64)
    rows = np.floor(rel[:, 1]).astype(np.int64)
    return np.stack([rows, cols], axis=1)


def pixel_centers(resolution: int, scale: float, origin: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(x, y) of pixel centers as two (R, R) arrays indexed [row, col]."""
    c = (np.arange(resolution) - resolution / 2.0 + 0.5) * scale
    xs = origin[0] + c
    ys = origin[1] + c
    X, Y = np.meshgrid(xs, ys)
    return X, Y


def rasterize_coordinate_map(
    cloud: PointCloud,
    resolution: int = DEFAULT_RESOLUTION,
    scale: float = DEFAULT_SCALE,
    origin: Optional[np.ndarray] = None,
    k: int = IDW_NEIGHBORS,
    gap_limit: float = GAP_LIMIT_PX,
) -> CoordinateMap:
    """Project ``cloud`` along z and fill gaps by inverse-distance weighting.

    ``origin`` defaults to the xy centroid of the cloud; pass a shared origin
    to put two clouds on a common grid.  Each occupied pixel keeps the point
    nearest its center.  Empty pixels inside the convex hull of occupied pixels
    whose nearest occupied pixel lies within ``gap_limit`` px are filled from up
    to ``k`` occupied pixels within that limit, weighted by 1/d².
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot rasterize an empty cloud")
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    pts = cloud.points
    origin = pts[:, :2].mean(axis=0) if origin is None else np.asarray(origin, dtype=float).reshape(2)

    rc = pixel_coords(pts[:, :2], resolution, scale, origin)
    inside = np.all((rc >= 0) & (rc < resolution), axis=1)
    pts, rc = pts[inside], rc[inside]

    xyz = np.zeros((resolution, resolution, 3))
    mask = np.zeros((resolution, resolution), dtype=bool)
    if len(pts) == 0:
        return CoordinateMap(xyz, mask, float(scale), origin)

    # nearest point to each pixel center wins; stable ordering breaks ties by index
    centers = (rc[:, ::-1] - resolution / 2.0 + 0.5) * scale + origin
    d2 = np.sum((pts[:, :2] - centers) ** 2, axis=1)
    flat = rc[:, 0] * resolution + rc[:, 1]
    order = np.lexsort((np.arange(len(flat)), d2, flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]
    occ_flat = flat[winners]
    xyz.reshape(-1, 3)[occ_flat] = pts[winners]
    mask.reshape(-1)[occ_flat] = True

    occ_rc = np.stack(np.divmod(occ_flat, resolution), axis=1).astype(float)
    if len(occ_rc) >= 3:
        _interpolate(xyz, mask, occ_rc, pts[winners], k, gap_limit)
    return CoordinateMap(xyz, mask, float(scale), origin)


def _interpolate(xyz, mask, occ_rc, occ_vals, k, gap_limit):
    try:
        hull = Delaunay(occ_rc)
    except QhullError:
        return  # collinear support: nothing lies strictly inside
    lo = occ_rc.min(axis=0).astype(int)
    hi = occ_rc.max(axis=0).astype(int)
    rr, cc = np.mgrid[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1]
    cand = np.stack([rr.ravel(), cc.ravel()], axis=1)
    cand = cand[~mask[cand[:, 0], cand[:, 1]]]
    if len(cand) == 0:
        return
    cand = cand[hull.find_simplex(cand.astype(float)) >= 0]
    if len(cand) == 0:
        return
    kk = min(k, len(occ_rc))
    dist, idx = cKDTree(occ_rc).query(cand.astype(float), k=kk, distance_upper_bound=gap_limit)
    dist = dist.reshape(len(cand), kk)
    idx = idx.reshape(len(cand), kk)
    ok = np.isfinite(dist)
    fill = ok[:, 0]
    if not np.any(fill):
        return
    dist, idx, ok, cand = dist[fill], idx[fill], ok[fill], cand[fill]
    w = np.where(ok, 1.0 / np.where(ok, dist, 1.0) ** 2, 0.0)
    w /= w.sum(axis=1, keepdims=True)
    safe_idx = np.where(ok, idx, 0)
    vals = np.einsum("nk,nkc->nc", w, occ_vals[safe_idx])
    xyz[cand[:, 0], cand[:, 1]] = vals
    mask[cand[:, 0], cand[:, 1]] = True


def to_depth_map(cmap: CoordinateMap) -> DepthMap:
    return DepthMap(cmap.xyz[:, :, 2].copy(), cmap.mask.copy(), cmap.scale, cmap.origin.copy())


def downsample_map(cmap: CoordinateMap, factor: int) -> CoordinateMap:
    """Block-average valid pixels; a block is masked iff all its pixels are."""
    r = cmap.resolution
    if factor < 1 or r % factor:
        raise BadFactor(f"factor {factor} does not divide resolution {r}")
    if factor == 1:
        return CoordinateMap(cmap.xyz.copy(), cmap.mask.copy(), cmap.scale, cmap.origin.copy())
    n = r // factor
    m = cmap.mask.reshape(n, factor, n, factor).astype(float)
    v = (cmap.xyz * cmap.mask[..., None]).reshape(n, factor, n, factor, 3)
    count = m.sum(axis=(1, 3))
    total = v.sum(axis=(1, 3))
    valid = count > 0
    xyz = np.where(valid[..., None], total / np.maximum(count, 1)[..., None], 0.0)
    return CoordinateMap(xyz, valid, cmap.scale * factor, cmap.origin.copy())


def map_to_points(cmap: CoordinateMap) -> np.ndarray:
    """Valid pixel values as an (N, 3) array."""
    return cmap.xyz[cmap.mask]
