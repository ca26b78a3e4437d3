"""Pose-regression losses with analytic gradients.

All variants score a 7-vector network output ``(t_x, t_y, t_z, r_0..r_3)``
against ground truth as ``translation_term + alpha * rotation_term``:

* ``quat_l2`` / ``quat_l1``: ``r`` is a raw quaternion, normalized and flipped
  onto the ground-truth hemisphere before differencing.
* ``aa_l2`` / ``aa_l1``: ``r`` is a raw ``(theta, v_x, v_y, v_z)`` compared with
  the canonical axis-angle of the ground truth, axis left unnormalized.

``alpha`` is scheduled per sample: ``alpha_boosted`` once the squared L2
rotation residual drops below ``boost_threshold``, ``alpha`` otherwise.
Norm kinks use subgradient 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import ZeroQuaternion
from .pose_math import AxisAngle, RigidTransform, UnitQuaternion, quat_to_axis_angle, qnormalize

VARIANTS = ("quat_l2", "quat_l1", "aa_l2", "aa_l1")
MIN_QUAT_NORM = 1e-8


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 500.0
    alpha_boosted: float = 1e4
    boost_threshold: float = 1e-4

    def __post_init__(self):
        if not (self.alpha_boosted >= self.alpha > 0):
            raise ValueError("need alpha_boosted >= alpha > 0")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(self.alpha * factor, self.alpha_boosted * factor, self.boost_threshold)

    def schedule(self, rot_sq: np.ndarray) -> np.ndarray:
        return np.where(np.asarray(rot_sq) < self.boost_threshold, self.alpha_boosted, self.alpha)


@dataclass(frozen=True, eq=False)
class PosePrediction:
    t: np.ndarray
    q_raw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "q_raw", np.asarray(self.q_raw, dtype=float).reshape(4))
        if np.linalg.norm(self.q_raw) <= MIN_QUAT_NORM:
            raise ZeroQuaternion("raw quaternion norm <= 1e-8")

    @classmethod
    def from_vector(cls, v) -> "PosePrediction":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:7])

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.q_raw])

    @property
    def q(self) -> UnitQuaternion:
        return UnitQuaternion.from_array(self.q_raw)

    def transform(self) -> RigidTransform:
        return RigidTransform(self.t, self.q)


@dataclass(frozen=True, eq=False)
class LossValue:
    total: float
    translation_term: float
    rotation_term: float
    alpha: float
    grads: np.ndarray  # d total / d (t, r_raw), shape (7,)
    singular: bool = False  # a norm argument was exactly zero


def gt_rotation_target(gt: RigidTransform, variant: str) -> np.ndarray:
    """Ground-truth rotation vector in the variant's representation."""
    if variant.startswith("quat"):
        return gt.q.array
    return quat_to_axis_angle(gt.q).vector


def _norm_grad(d: np.ndarray, l1: bool):
    """Norm of each row of ``d`` and its gradient w.r.t. ``d``; 0 at kinks."""
    if l1:
        return np.abs(d).sum(axis=-1), np.sign(d), np.zeros(d.shape[0], dtype=bool)
    n = np.linalg.norm(d, axis=-1)
    zero = n == 0.0
    g = d / np.where(zero, 1.0, n)[:, None]
    g[zero] = 0.0
    return n, g, zero


def batch_loss(variant: str, out: np.ndarray, gt_t: np.ndarray, gt_r: np.ndarray,
               weights: LossWeights = LossWeights()) -> dict:
    """Vectorized loss over a batch of raw outputs ``out`` (B, 7).

    Returns a dict of per-sample arrays: ``total``, ``trans``, ``rot``,
    ``alpha``, ``grad`` (B, 7) and ``singular``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    out = np.atleast_2d(np.asarray(out, dtype=float))
    gt_t = np.atleast_2d(gt_t)
    gt_r = np.atleast_2d(gt_r)
    l1 = variant.endswith("l1")
    grad = np.zeros_like(out)

    dt = gt_t - out[:, :3]
    trans, g_t, sing_t = _norm_grad(dt, l1)
    grad[:, :3] = -g_t

    raw = out[:, 3:7]
    if variant.startswith("quat"):
        n = np.linalg.norm(raw, axis=1)
        if np.any(n <= MIN_QUAT_NORM):
            raise ZeroQuaternion("raw quaternion norm <= 1e-8")
        q = raw / n[:, None]
        s = np.where(np.sum(q * gt_r, axis=1) < 0.0, -1.0, 1.0)
        d = gt_r - s[:, None] * q
        rot, g_d, sing_r = _norm_grad(d, l1)
        rot_sq = np.sum(d * d, axis=1)
        alpha = weights.schedule(rot_sq)
        g_q = -(alpha * s)[:, None] * g_d
        # through q = raw / |raw|
        grad[:, 3:7] = (g_q - q * np.sum(q * g_q, axis=1, keepdims=True)) / n[:, None]
    else:
        d = gt_r - raw
        rot, g_d, sing_r = _norm_grad(d, l1)
        rot_sq = np.sum(d * d, axis=1)
        alpha = weights.schedule(rot_sq)
        grad[:, 3:7] = -alpha[:, None] * g_d

    return {
        "total": trans + alpha * rot,
        "trans": trans,
        "rot": rot,
        "alpha": alpha,
        "grad": grad,
        "singular": sing_t | sing_r,
    }


def _single(variant: str, pred_vec: np.ndarray, gt: RigidTransform, w: LossWeights) -> LossValue:
    r = batch_loss(variant, pred_vec[None, :], gt.t[None, :], gt_rotation_target(gt, variant)[None, :], w)
    return LossValue(float(r["total"][0]), float(r["trans"][0]), float(r["rot"][0]),
                     float(r["alpha"][0]), r["grad"][0], bool(r["singular"][0]))


def loss_quat_l2(pred: PosePrediction, gt: RigidTransform, w: LossWeights = LossWeights()) -> LossValue:
    return _single("quat_l2", pred.vector, gt, w)


def loss_quat_l1(pred: PosePrediction, gt: RigidTransform, w: LossWeights = LossWeights()) -> LossValue:
    return _single("quat_l1", pred.vector, gt, w)


def _aa_vector(t, pred_aa) -> np.ndarray:
    return np.concatenate([np.asarray(t, dtype=float).reshape(3), np.asarray(pred_aa, dtype=float).reshape(4)])


def loss_axis_angle_l2(t_pred, pred_aa, gt: RigidTransform, w: LossWeights = LossWeights()) -> LossValue:
    """``pred_aa`` is the raw ``(theta, v_x, v_y, v_z)`` output."""
    return _single("aa_l2", _aa_vector(t_pred, pred_aa), gt, w)


def loss_axis_angle_l1(t_pred, pred_aa, gt: RigidTransform, w: LossWeights = LossWeights()) -> LossValue:
    return _single("aa_l1", _aa_vector(t_pred, pred_aa), gt, w)


def loss_rotation_identity_check(q_g: UnitQuaternion, q_p: UnitQuaternion) -> tuple[float, float]:
    """(``|q_g q_p^-1 - 1|²``, ``|q_g - q_p|²``) for same-hemisphere inputs."""
    l1, l2 = rotation_identity_arrays(q_g.array[None], q_p.array[None])
    return float(l1[0]), float(l2[0])


def rotation_identity_arrays(q_g: np.ndarray, q_p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    from .pose_math import qconj, qmul

    qe = qmul(q_g, qconj(q_p))
    loss1 = np.sum((qe - np.array([1.0, 0.0, 0.0, 0.0])) ** 2, axis=-1)
    loss2 = np.sum((q_g - q_p) ** 2, axis=-1)
    return loss1, loss2


def prediction_to_transform(variant: str, out: np.ndarray) -> RigidTransform:
    """Interpret a raw 7-vector as a rigid transform."""
    out = np.asarray(out, dtype=float)
    if variant.startswith("quat"):
        if np.linalg.norm(out[3:7]) <= MIN_QUAT_NORM:
            raise ZeroQuaternion("raw quaternion norm <= 1e-8")
        return RigidTransform(out[:3], UnitQuaternion.from_array(out[3:7]))
    theta, axis = out[3], out[4:7]
    if np.linalg.norm(axis) <= MIN_QUAT_NORM:
        return RigidTransform(out[:3], UnitQuaternion.identity())
    return RigidTransform(out[:3], UnitQuaternion.from_array(
        np.concatenate([[np.cos(theta / 2)], np.sin(theta / 2) * qnormalize(axis)])))


def kink_distance(variant: str, out: np.ndarray, gt_t: np.ndarray, gt_r: np.ndarray,
                  weights: LossWeights = LossWeights()) -> float:
    """Distance (in loss-argument units) to the nearest non-smooth point."""
    out = np.asarray(out, dtype=float)
    dt = gt_t - out[:3]
    raw = out[3:7]
    if variant.startswith("quat"):
        q = raw / np.linalg.norm(raw)
        dot = float(q @ gt_r)
        d = gt_r - (1.0 if dot >= 0 else -1.0) * q
        cands = [abs(dot)]
    else:
        d = gt_r - raw
        cands = []
    if variant.endswith("l1"):
        cands += list(np.abs(dt)) + list(np.abs(d))
    else:
        cands += [np.linalg.norm(dt), np.linalg.norm(d)]
    cands.append(abs(float(d @ d) - weights.boost_threshold))
    return float(min(cands))


def grad_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], point: np.ndarray,
               eps: float = 1e-5, floor: float = 1e-3) -> float:
    """Max relative error between ``fn``'s analytic gradient and central
    differences.

    Per coordinate the error is ``|a - n| / max(|a|, |n|, floor * G)`` with
    ``G`` the largest gradient magnitude, so near-zero components are judged
    against the gradient's scale rather than against themselves.
    """
    x = np.array(point, dtype=float)
    _, analytic = fn(x)
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.empty_like(analytic)
    flat = x.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp, _ = fn(x)
        flat[i] = old - eps
        fm, _ = fn(x)
        flat[i] = old
        numeric[i] = (fp - fm) / (2.0 * eps)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-300)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def loss_fn_for(variant: str, gt: RigidTransform, weights: LossWeights = LossWeights()):
    """Closure ``x -> (total, grad)`` over a raw 7-vector, for :func:`grad_check`."""
    gt_r = gt_rotation_target(gt, variant)

    def fn(x):
        r = batch_loss(variant, x[None, :], gt.t[None, :], gt_r[None, :], weights)
        return float(r["total"][0]), r["grad"][0]

    return fn


def sample_smooth_point(variant: str, gt: RigidTransform, rng: np.random.Generator,
                        margin: float = 1e-3, weights: LossWeights = LossWeights(),
                        max_tries: int = 1000) -> np.ndarray:
    """Random raw output at least ``margin`` away from every kink."""
    gt_r = gt_rotation_target(gt, variant)
    for _ in range(max_tries):
        x = np.concatenate([gt.t + rng.normal(0, 3.0, 3), gt_r + rng.normal(0, 0.3, 4)])
        if kink_distance(variant, x, gt.t, gt_r, weights) > margin:
            return x
    raise RuntimeError("could not sample a smooth point")
