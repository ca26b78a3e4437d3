"""Fusing a six-frame sequence into one cloud, z-denoising it, and producing
augmented depth maps from the result."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from .cloud import DEFAULT_RESOLUTION, DEFAULT_SCALE, DepthMap, PointCloud, rasterize_coordinate_map, to_depth_map
from .errors import EmptyCloud, IndexMismatch
from .pose_math import EulerAngles, RigidTransform, euler_to_quat
from .synth import FrameSequence

DENOISE_RADIUS = 3.0  # mm, lateral (x-y) neighborhood
DENOISE_THRESHOLD = 2.0  # mm


@dataclass(frozen=True, eq=False)
class FusedCloud:
    points: PointCloud
    source_frame: np.ndarray  # (N,) frame index of each point
    denoised_flags: np.ndarray  # (N,) bool, z replaced by the neighbor mean

    def __post_init__(self):
        n = len(self.points)
        src = np.asarray(self.source_frame, dtype=np.int64).reshape(-1)
        flags = np.asarray(self.denoised_flags, dtype=bool).reshape(-1)
        if src.shape != (n,) or flags.shape != (n,):
            raise ValueError("per-point arrays must match the point count")
        for a in (src, flags):
            a.setflags(write=False)
        object.__setattr__(self, "source_frame", src)
        object.__setattr__(self, "denoised_flags", flags)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points.points


def fuse_sequence(seq: FrameSequence,
                  transforms: Union[Mapping[int, RigidTransform], Sequence[RigidTransform]]) -> FusedCloud:
    """Map every non-reference frame into the reference frame and take the union.

    ``transforms`` is either a mapping ``frame index -> transform`` over exactly
    the non-reference frames, or a sequence of five transforms listed in frame
    order with the reference skipped.
    """
    ref = seq.reference_index
    others = [i for i in range(len(seq.frames)) if i != ref]
    if isinstance(transforms, Mapping):
        if sorted(int(k) for k in transforms) != others:
            raise IndexMismatch(f"transforms must cover frames {others}, got {sorted(transforms)}")
        tmap = {int(k): v for k, v in transforms.items()}
    else:
        transforms = list(transforms)
        if len(transforms) != len(others):
            raise IndexMismatch(f"expected {len(others)} transforms, got {len(transforms)}")
        tmap = dict(zip(others, transforms))
    chunks, src = [], []
    for i, frame in enumerate(seq.frames):
        pts = frame.points if i == ref else tmap[i].apply(frame.points)
        chunks.append(pts)
        src.append(np.full(len(pts), i, dtype=np.int64))
    points = np.concatenate(chunks) if chunks else np.zeros((0, 3))
    cloud = PointCloud(points, id=seq.identity, frame_index=ref)
    source = np.concatenate(src)
    return FusedCloud(cloud, source, np.zeros(len(points), dtype=bool))


def neighbor_pairs(xy: np.ndarray, radius: float) -> np.ndarray:
    """All unordered index pairs ``(i, j)``, ``i < j``, with
    ``dx*dx + dy*dy <= radius*radius``.

    The tree proposes candidates with a slightly inflated radius; the final
    decision uses the plain squared-distance predicate so results do not
    depend on the tree's internal rounding.
    """
    xy = np.asarray(xy, dtype=float)
    if len(xy) < 2:
        return np.zeros((0, 2), dtype=np.int64)
    tree = cKDTree(xy)
    cand = tree.query_pairs(radius * (1.0 + 1e-9) + 1e-12, output_type="ndarray")
    if len(cand) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = xy[cand[:, 0]] - xy[cand[:, 1]]
    keep = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] <= radius * radius
    return cand[keep].astype(np.int64)


def neighbor_mean_z(points: np.ndarray, radius: float = DENOISE_RADIUS) -> tuple[np.ndarray, np.ndarray]:
    """(mean z of lateral neighbors, neighbor count) per point, self excluded.

    The mean is NaN where the count is zero.
    """
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    pairs = neighbor_pairs(pts[:, :2], radius)
    i, j = pairs[:, 0], pairs[:, 1]
    z = pts[:, 2]
    count = np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    total = np.bincount(i, weights=z[j], minlength=n) + np.bincount(j, weights=z[i], minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean, count


def denoise(cloud: Union[FusedCloud, PointCloud], radius: float = DENOISE_RADIUS,
            threshold: float = DENOISE_THRESHOLD) -> FusedCloud:
    """Replace z by the neighbor mean wherever they differ by more than ``threshold``.

    One pass over a snapshot of the input: every decision reads the original
    heights, so the result does not depend on point order.
    """
    if isinstance(cloud, PointCloud):
        cloud = FusedCloud(cloud, np.zeros(len(cloud), dtype=np.int64), np.zeros(len(cloud), dtype=bool))
    if len(cloud) == 0:
        raise EmptyCloud("cannot denoise an empty cloud")
    pts = cloud.xyz
    zm, count = neighbor_mean_z(pts, radius)
    with np.errstate(invalid="ignore"):
        update = (count > 0) & (np.abs(pts[:, 2] - zm) > threshold)
    out = pts.copy()
    out[update, 2] = zm[update]
    return FusedCloud(cloud.points.with_points(out), cloud.source_frame, cloud.denoised_flags | update)


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentSpec:
    pose_jitter: tuple[float, float] = (-10.0, 10.0)  # degrees, each Euler angle
    patch_count_range: tuple[int, int] = (1, 6)
    patch_size_range: tuple[int, int] = (0, 20)  # px, square side
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.pose_jitter
        if lo > hi:
            raise ValueError("pose_jitter range is reversed")
        c0, c1 = self.patch_count_range
        if not 1 <= c0 <= c1:
            raise ValueError("patch counts must satisfy 1 <= low <= high")
        s0, s1 = self.patch_size_range
        if not 0 <= s0 <= s1:
            raise ValueError("patch sizes must satisfy 0 <= low <= high")


def jitter_pose(cloud: PointCloud, spec: AugmentSpec, rng: np.random.Generator) -> tuple[PointCloud, RigidTransform]:
    """Rotate the cloud about its centroid by random roll, pitch and yaw."""
    lo, hi = spec.pose_jitter
    e = EulerAngles(*(float(v) for v in rng.uniform(lo, hi, size=3)))
    q = euler_to_quat(e)
    c = cloud.centroid
    T = RigidTransform(c - q.matrix() @ c, q)
    return cloud.with_points(T.apply(cloud.points)), T


def augment_depth(depth_map: DepthMap, spec: AugmentSpec, rng: np.random.Generator) -> DepthMap:
    """Blank out a random number of square patches at uniform positions."""
    R = depth_map.resolution
    depth = depth_map.depth.copy()
    mask = depth_map.mask.copy()
    k = int(rng.integers(spec.patch_count_range[0], spec.patch_count_range[1] + 1))
    for _ in range(k):
        side = int(rng.integers(spec.patch_size_range[0], spec.patch_size_range[1] + 1))
        side = min(side, R)
        r0 = int(rng.integers(0, R - side + 1))
        c0 = int(rng.integers(0, R - side + 1))
        mask[r0:r0 + side, c0:c0 + side] = False
        depth[r0:r0 + side, c0:c0 + side] = 0.0
    return DepthMap(depth, mask, depth_map.scale, depth_map.origin.copy())


def augmented_depth_map(cloud: Union[FusedCloud, PointCloud], spec: AugmentSpec,
                        rng: Optional[np.random.Generator] = None, resolution: int = DEFAULT_RESOLUTION,
                        scale: float = DEFAULT_SCALE) -> DepthMap:
    """Pose jitter, rasterization centered on the cloud, then patch occlusion."""
    pc = cloud.points if isinstance(cloud, FusedCloud) else cloud
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    moved, _ = jitter_pose(pc, spec, rng)
    dm = to_depth_map(rasterize_coordinate_map(moved, resolution, scale))
    return augment_depth(dm, spec, rng)
