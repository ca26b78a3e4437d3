"""Trimmed point-to-point ICP baseline."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud
from .errors import DegenerateGeometry, TooFewPoints
from .pose_math import (RigidTransform, UnitQuaternion, axis_quat, matrix_to_quat, quat_to_axis_angle,
                        rotation_error)
from .spatial import VoxelHashIndex

FAILURE_THRESHOLD_DEG = 20.0


@dataclass(frozen=True)
class IcpConfig:
    max_iterations: int = 100
    convergence_tol: float = 1e-4  # mm, change in trimmed RMS residual
    trim_fraction: float = 0.1
    seed: int = 0  # reserved for randomized initializations; the default start is deterministic
    center_init: bool = True  # start from the centroid-aligning translation
    accelerate: bool = True  # extrapolate along consistent update directions
    accel_angle_deg: float = 10.0

    def __post_init__(self):
        if not 0.0 <= self.trim_fraction < 1.0:
            raise ValueError("trim_fraction must lie in [0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be positive")


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    iterations: int
    final_residual: float
    converged: bool
    residuals: tuple[float, ...] = field(default=(), repr=False)

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_dict(),
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "converged": self.converged,
        }


def best_rigid_transform(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rotation and translation taking ``src`` onto ``dst``
    (SVD of the cross-covariance, reflection corrected)."""
    ca = src.mean(axis=0)
    cb = dst.mean(axis=0)
    A = src - ca
    B = dst - cb
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("matched points are collinear or coincident")
    H = A.T @ B
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    q = UnitQuaternion.from_array(matrix_to_quat(R))
    t = cb - q.matrix() @ ca
    return RigidTransform(t, q)


def icp_register(source: PointCloud, target: PointCloud, cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Register ``source`` onto ``target``; returns the source->target transform."""
    src = source.points
    tgt = target.points
    if len(src) < 10 or len(tgt) < 10:
        raise TooFewPoints("ICP needs at least 10 points in each cloud")
    index = VoxelHashIndex(tgt)
    keep_n = len(src) - int(np.floor(cfg.trim_fraction * len(src)))

    if cfg.center_init:
        T = RigidTransform(tgt.mean(axis=0) - src.mean(axis=0))
    else:
        T = RigidTransform.identity()
    radius = float(np.sqrt(np.mean(np.sum((src - src.mean(axis=0)) ** 2, axis=1)))) or 1.0
    cos_limit = np.cos(np.radians(cfg.accel_angle_deg))

    def evaluate(T):
        moved = T.apply(src)
        d, j = index.query(moved)
        keep = np.argpartition(d, keep_n - 1)[:keep_n] if keep_n < len(d) else np.arange(len(d))
        return float(np.sqrt(np.mean(d[keep] ** 2))), moved, j, keep

    residuals = []
    prev = np.inf
    prev_dir = None
    converged = False
    it = 0
    r, moved, j, keep = evaluate(T)
    for it in range(1, cfg.max_iterations + 1):
        residuals.append(r)
        if prev - r < cfg.convergence_tol:
            converged = True
            break
        prev = r
        if it == cfg.max_iterations:
            break
        step = best_rigid_transform(moved[keep], tgt[j[keep]])
        T = step @ T
        state = evaluate(T)
        direction = _motion_vector(step, radius)
        if cfg.accelerate and prev_dir is not None and _cosine(direction, prev_dir) > cos_limit:
            T, state = _extrapolate(evaluate, step, T, state)
        prev_dir = direction
        r, moved, j, keep = state
    return IcpResult(T, it, residuals[-1], converged, tuple(residuals))


def _motion_vector(step: RigidTransform, radius: float) -> np.ndarray:
    aa = quat_to_axis_angle(step.q)
    return np.concatenate([aa.theta * np.asarray(aa.axis) * radius, step.t])


def _cosine(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return -1.0
    return float(a @ b / (na * nb))


def _scaled_step(step: RigidTransform, factor: float) -> RigidTransform:
    aa = quat_to_axis_angle(step.q)
    return RigidTransform(step.t * factor, UnitQuaternion.from_array(axis_quat(aa.axis, aa.theta * factor)))


def _extrapolate(evaluate, step, T, state):
    """Repeat ``step`` with doubling length while the trimmed residual drops.

    Only improvements are accepted, so the residual sequence stays monotone.
    """
    best_T, best = T, state
    factor = 1.0
    for _ in range(6):
        cand_T = _scaled_step(step, factor) @ best_T
        cand = evaluate(cand_T)
        if cand[0] >= best[0]:
            break
        best_T, best = cand_T, cand
        factor *= 2.0
    return best_T, best


def icp_failure_rate(results, threshold: float = FAILURE_THRESHOLD_DEG) -> float:
    """Fraction of ``(IcpResult | RigidTransform, gt)`` pairs whose rotation
    error exceeds ``threshold`` degrees."""
    results = list(results)
    if not results:
        raise ValueError("no results")
    fails = 0
    for res, gt in results:
        T = res.transform if isinstance(res, IcpResult) else res
        fails += rotation_error(gt.q, T.q) > threshold
    return fails / len(results)
