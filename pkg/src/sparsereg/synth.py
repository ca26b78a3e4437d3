"""Synthetic face-like identities and the sparse-sequence data pipeline.

A dense scan is perturbed in pose, corrupted with depth noise on a tenth of
its points, then reduced to roughly 1,000 points by keeping one random point
per occupied grid cell.  Six such frames make a sequence; pairs of frames from
the same identity make the registration benchmarks.

Every random draw comes from a generator derived from ``(master seed, task
index...)`` so any single sequence or pair can be regenerated on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .cloud import PointCloud
from .errors import EmptyCloud
from .pose_math import EulerAngles, RigidTransform, euler_to_quat

Interval = tuple[float, float]

SUPPORT_RHO = 0.85  # fraction of the ellipse radii kept as the face support
MAX_BUMPS = 10
BUMP_FIELDS = 5
N_PARAMS = 5 + MAX_BUMPS * BUMP_FIELDS


def task_rng(seed: int, *index: int) -> np.random.Generator:
    """Independent generator for task ``index`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in index)))


def _as_seed(seed_or_rng: Union[int, np.random.Generator]) -> int:
    if isinstance(seed_or_rng, np.random.Generator):
        return int(seed_or_rng.integers(0, 2**63 - 1))
    return int(seed_or_rng)


# --------------------------------------------------------------------------
# pose ranges
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseRanges:
    """Sampling ranges in degrees (angles) and mm (translation).

    Each field is a union of closed intervals; draws are uniform over the
    union.
    """

    alpha: tuple[Interval, ...] = ((-45.0, 45.0),)
    beta: tuple[Interval, ...] = ((-20.0, 20.0),)
    gamma: tuple[Interval, ...] = ((-30.0, 30.0),)
    t: tuple[Interval, ...] = ((-8.0, 8.0),)

    @classmethod
    def standard(cls) -> "PoseRanges":
        return cls()

    @classmethod
    def difficult(cls) -> "PoseRanges":
        return cls(
            alpha=((-45.0, -30.0), (30.0, 45.0)),
            gamma=((-30.0, -20.0), (20.0, 30.0)),
        )

    @classmethod
    def zero(cls) -> "PoseRanges":
        z = ((0.0, 0.0),)
        return cls(alpha=z, beta=z, gamma=z, t=z)

    @classmethod
    def for_regime(cls, regime: str) -> "PoseRanges":
        if regime == "standard":
            return cls.standard()
        if regime == "difficult":
            return cls.difficult()
        raise ValueError(f"unknown regime {regime!r}")

    def contains(self, euler: EulerAngles, t: Sequence[float], tol: float = 1e-6) -> bool:
        def inside(v, ivs):
            return any(lo - tol <= v <= hi + tol for lo, hi in ivs)
        return (inside(euler.alpha, self.alpha) and inside(euler.beta, self.beta)
                and inside(euler.gamma, self.gamma) and all(inside(v, self.t) for v in t))


def _draw(rng: np.random.Generator, intervals: tuple[Interval, ...], size=None):
    lo = np.array([a for a, _ in intervals])
    hi = np.array([b for _, b in intervals])
    width = hi - lo
    if len(intervals) == 1 or width.sum() == 0:
        k = np.zeros(size, dtype=int) if size is not None else 0
    else:
        k = rng.choice(len(intervals), size=size, p=width / width.sum())
    return lo[k] + rng.random(size) * width[k]


def draw_pose(rng: np.random.Generator, ranges: PoseRanges) -> tuple[EulerAngles, RigidTransform]:
    e = EulerAngles(float(_draw(rng, ranges.alpha)), float(_draw(rng, ranges.beta)),
                    float(_draw(rng, ranges.gamma)))
    t = _draw(rng, ranges.t, size=3)
    return e, RigidTransform(t, euler_to_quat(e))


# --------------------------------------------------------------------------
# identities
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SyntheticIdentity:
    """Face-like height field: a half-ellipsoid plus anisotropic Gaussian bumps.

    ``params`` layout: ``[rx, ry, depth, z_offset, n_bumps]`` followed by
    ``MAX_BUMPS`` slots of ``(cx, cy, height, sx, sy)`` (unused slots are zero).
    """

    seed: int
    params: np.ndarray

    @property
    def radii(self) -> tuple[float, float]:
        return float(self.params[0]), float(self.params[1])

    @property
    def bumps(self) -> np.ndarray:
        n = int(self.params[4])
        return self.params[5:5 + BUMP_FIELDS * n].reshape(n, BUMP_FIELDS)

    @property
    def label(self) -> str:
        return f"id{self.seed}"

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        """Nominal xy bounding box (min, max) of the support."""
        rx, ry = self.radii
        half = np.array([rx, ry]) * SUPPORT_RHO
        return -half, half

    def in_support(self, x, y) -> np.ndarray:
        rx, ry = self.radii
        return (np.asarray(x) / rx) ** 2 + (np.asarray(y) / ry) ** 2 <= SUPPORT_RHO ** 2

    def surface(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        rx, ry = self.radii
        depth, z_off = self.params[2], self.params[3]
        r2 = np.clip((x / rx) ** 2 + (y / ry) ** 2, 0.0, 1.0)
        z = depth * np.sqrt(1.0 - r2)
        for cx, cy, h, sx, sy in self.bumps:
            z = z + h * np.exp(-0.5 * (((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))
        return z - z_off


# feature height multiplier; pronounced relief keeps ICP well conditioned on
# moderate poses while large relative rolls still trap it
RELIEF = 1.3


def generate_identity(seed: int) -> SyntheticIdentity:
    rng = task_rng(seed, 0x1D)
    u = rng.uniform
    rx = u(65.0, 72.0)
    ry = u(86.0, 94.0)
    depth = u(80.0, 95.0)
    h = RELIEF
    eye_y, brow_y, cheek_y = u(14, 22), u(32, 38), u(-20, -10)
    bumps = [
        (u(-2, 2), u(-12, -2), h * u(22, 30), u(7, 10), u(14, 20)),  # nose ridge
        (u(-2, 2), u(-22, -16), h * u(6, 10), u(5, 8), u(5, 8)),  # nose tip
        (-u(28, 36), eye_y, -h * u(8, 12), u(10, 13), u(7, 10)),  # eye sockets
        (u(28, 36), eye_y, -h * u(8, 12), u(10, 13), u(7, 10)),
        (-u(28, 36), brow_y, h * u(4, 7), u(12, 16), u(4, 6)),  # brows
        (u(28, 36), brow_y, h * u(4, 7), u(12, 16), u(4, 6)),
        (u(-3, 3), u(-45, -38), -h * u(3, 6), u(14, 20), u(3, 5)),  # mouth
        (u(-4, 4), u(-66, -58), h * u(4, 8), u(12, 16), u(8, 12)),  # chin
        (-u(34, 42), cheek_y, h * u(3, 6), u(12, 18), u(12, 18)),  # cheeks
        (u(34, 42), cheek_y, h * u(3, 6), u(12, 18), u(12, 18)),
    ]
    params = np.zeros(N_PARAMS)
    params[:5] = [rx, ry, depth, 0.0, len(bumps)]
    params[5:5 + BUMP_FIELDS * len(bumps)] = np.ravel(bumps)
    ident = SyntheticIdentity(int(seed), params)
    # center the support's mean height on z = 0
    gx, gy = np.meshgrid(np.linspace(-rx, rx, 81), np.linspace(-ry, ry, 81))
    inside = ident.in_support(gx, gy)
    params[3] = float(ident.surface(gx[inside], gy[inside]).mean())
    params.setflags(write=False)
    return SyntheticIdentity(int(seed), params)


def sample_dense(identity: SyntheticIdentity, n: int = 10_000,
                 rng: Optional[np.random.Generator] = None) -> PointCloud:
    """``n`` points uniform over the xy support with exact surface heights."""
    if n < 10_000:
        raise ValueError("dense scans need at least 10,000 points")
    rng = task_rng(identity.seed, 0xD5) if rng is None else rng
    rx, ry = identity.radii
    out = np.empty((0, 2))
    while len(out) < n:
        cand = rng.uniform(-1.0, 1.0, size=(2 * n, 2)) * np.array([rx, ry]) * SUPPORT_RHO
        out = np.vstack([out, cand[identity.in_support(cand[:, 0], cand[:, 1])]])
    xy = out[:n]
    z = identity.surface(xy[:, 0], xy[:, 1])
    return PointCloud(np.column_stack([xy, z]), id=identity.label)


# --------------------------------------------------------------------------
# frame pipeline
# --------------------------------------------------------------------------

def perturb_pose(cloud: PointCloud, rng: np.random.Generator,
                 ranges: PoseRanges = PoseRanges()) -> tuple[PointCloud, RigidTransform]:
    _, T = draw_pose(rng, ranges)
    return cloud.with_points(T.apply(cloud.points)), T


def add_noise(cloud: PointCloud, rng: np.random.Generator, fraction: float = 0.1,
              std: float = 2.0, return_indices: bool = False):
    """Perturb z of exactly ``floor(fraction * n)`` distinct points by N(0, std²).

    The default std of 2 mm reads the N(0, 4) noise model as variance 4 mm².
    """
    n = len(cloud)
    k = int(np.floor(fraction * n))
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=int)
    pts = cloud.points.copy()
    pts[idx, 2] += rng.normal(0.0, std, size=k)
    out = cloud.with_points(pts)
    return (out, idx) if return_indices else out


def _grid_cells(xy: np.ndarray, lo: np.ndarray, size: float) -> np.ndarray:
    ij = np.floor((xy - lo) / size).astype(np.int64)
    return ij[:, 0] * (int(ij[:, 1].max()) + 1) + ij[:, 1]


def _occupied(xy, lo, size) -> int:
    return int(np.count_nonzero(np.bincount(_grid_cells(xy, lo, size))))


def sparse_cell_size(xy: np.ndarray, grids: int) -> float:
    """Smallest square cell size (to bisection tolerance) with at most
    ``grids`` occupied cells over the xy bounding box."""
    lo = xy.min(axis=0)
    span = xy.max(axis=0) - lo
    area = max(float(span[0] * span[1]), 1e-12)
    s0 = np.sqrt(area / grids)
    hi = max(s0, 1e-9)
    while _occupied(xy, lo, hi) > grids:
        hi *= 1.5
    low = hi / 4.0
    if _occupied(xy, lo, low) <= grids:
        return low
    for _ in range(40):
        mid = 0.5 * (low + hi)
        if _occupied(xy, lo, mid) <= grids:
            hi = mid
        else:
            low = mid
        if hi - low < 1e-5 * s0:
            break
    return hi


def sparse_sample(cloud: PointCloud, grids: int = 1000,
                  rng: Optional[np.random.Generator] = None) -> PointCloud:
    """Keep one uniformly chosen point per occupied xy grid cell.

    Cells are equal squares over the xy bounding box, sized so the number of
    occupied cells is as close to ``grids`` as possible without exceeding it.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot sample an empty cloud")
    rng = np.random.default_rng(0) if rng is None else rng
    xy = cloud.points[:, :2]
    size = sparse_cell_size(xy, grids)
    cells = _grid_cells(xy, xy.min(axis=0), size)
    key = rng.random(len(cells))
    order = np.lexsort((key, cells))
    c = cells[order]
    first = np.ones(len(c), dtype=bool)
    first[1:] = c[1:] != c[:-1]
    keep = np.sort(order[first])
    return cloud.with_points(cloud.points[keep])


@dataclass(frozen=True)
class SynthConfig:
    dense_points: int = 10_000
    grids: int = 1000
    noise_fraction: float = 0.1
    noise_std: float = 2.0
    frames: int = 6


def make_frame(dense: PointCloud, rng: np.random.Generator, ranges: PoseRanges,
               config: SynthConfig = SynthConfig(), pose: Optional[RigidTransform] = None,
               ) -> tuple[PointCloud, RigidTransform]:
    """Pose perturbation, then noise, then grid sparse sampling."""
    if pose is None:
        moved, pose = perturb_pose(dense, rng, ranges)
    else:
        moved = dense.with_points(pose.apply(dense.points))
    noisy = add_noise(moved, rng, config.noise_fraction, config.noise_std)
    return sparse_sample(noisy, config.grids, rng), pose


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Six sparse frames of one identity.

    ``poses[i]`` maps the standard (pre-aligned) pose to frame ``i``, so the
    transform taking frame ``i`` onto frame ``j`` is
    ``poses[j] ∘ poses[i]^-1``.  The reference frame's pose is the identity.
    """

    frames: tuple[PointCloud, ...]
    poses: tuple[RigidTransform, ...]
    reference_index: int
    identity: str
    seed: int = 0

    def relative(self, i: int, j: int) -> RigidTransform:
        return self.poses[j] @ self.poses[i].inverse()

    def to_reference(self, i: int) -> RigidTransform:
        return self.relative(i, self.reference_index)


def generate_sequence(identity: SyntheticIdentity, rng: Union[int, np.random.Generator],
                      config: SynthConfig = SynthConfig(),
                      ranges: PoseRanges = PoseRanges()) -> FrameSequence:
    seed = _as_seed(rng)
    dense = sample_dense(identity, config.dense_points, task_rng(seed, 0))
    ref = int(task_rng(seed, 1).integers(config.frames))
    frames, poses = [], []
    for i in range(config.frames):
        frng = task_rng(seed, 2, i)
        pose = RigidTransform.identity() if i == ref else None
        f, p = make_frame(dense, frng, ranges, config, pose=pose)
        frames.append(PointCloud(f.points, id=identity.label, frame_index=i))
        poses.append(p)
    return FrameSequence(tuple(frames), tuple(poses), ref, identity.label, seed)


# --------------------------------------------------------------------------
# pair sets
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RegistrationPair:
    source: PointCloud
    target: PointCloud
    gt: RigidTransform  # source -> target
    source_pose: EulerAngles
    target_pose: EulerAngles
    identity: str


@dataclass(frozen=True, eq=False)
class PairSet:
    pairs: list[RegistrationPair]
    regime: str
    seed: int = 0

    def __len__(self) -> int:
        return len(self.pairs)


def identity_pool(seed: int, pool_size: int) -> list[SyntheticIdentity]:
    return [generate_identity(int(task_rng(seed, 7, k).integers(0, 2**31 - 1))) for k in range(pool_size)]


def generate_pair(identity: SyntheticIdentity, dense: PointCloud, seed: int, index: int,
                  ranges: PoseRanges, config: SynthConfig = SynthConfig()) -> RegistrationPair:
    rng = task_rng(seed, 9, index)
    e_s, T_s = draw_pose(rng, ranges)
    e_t, T_t = draw_pose(rng, ranges)
    src, _ = make_frame(dense, rng, ranges, config, pose=T_s)
    tgt, _ = make_frame(dense, rng, ranges, config, pose=T_t)
    return RegistrationPair(
        PointCloud(src.points, id=identity.label), PointCloud(tgt.points, id=identity.label),
        T_t @ T_s.inverse(), e_s, e_t, identity.label,
    )


def generate_pair_set(n: int, regime: str, rng: Union[int, np.random.Generator],
                      pool_size: int = 50, config: SynthConfig = SynthConfig(),
                      ranges: Optional[PoseRanges] = None) -> PairSet:
    """``n`` source/target pairs, identity ``k % pool_size`` for pair ``k``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = _as_seed(rng)
    ranges = PoseRanges.for_regime(regime) if ranges is None else ranges
    pool = identity_pool(seed, min(pool_size, n))
    dense = {}
    pairs = []
    for k in range(n):
        ident = pool[k % len(pool)]
        if ident.label not in dense:
            dense[ident.label] = sample_dense(ident, config.dense_points)
        pairs.append(generate_pair(ident, dense[ident.label], seed, k, ranges, config))
    return PairSet(pairs, regime, seed)
