"""Quaternion and rigid-transform algebra plus registration error metrics.

Quaternions are stored scalar-first, ``(w, x, y, z)``.  Array helpers accept
``(..., 4)`` inputs so batches can be processed without Python loops; the
dataclasses wrap single values for the public API.

Euler convention (used by data generation and reporting alike): roll ``alpha``
about z, pitch ``beta`` about x, yaw ``gamma`` about y, applied to points in
the fixed (extrinsic) order roll, then pitch, then yaw.  Angles are radians
internally and degrees at every external interface.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ZeroQuaternion

NULL_AXIS = np.array([0.0, 0.0, 1.0])
_AXIS_EPS = 1e-12


# --------------------------------------------------------------------------
# array-level helpers
# --------------------------------------------------------------------------

def qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of (..., 4) arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def qconj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def qnormalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


CANON_EPS = 1e-12  # components this small are rounding noise when picking the hemisphere


def qcanonical(q: np.ndarray) -> np.ndarray:
    """Resolve the double cover: w >= 0, and if w == 0 the first nonzero
    imaginary component is positive.

    "Zero" means ``|c| <= CANON_EPS`` so that rounding noise on a half-turn
    does not flip the representative.
    """
    q = np.array(q, dtype=float, copy=True)
    flat = q.reshape(-1, 4)
    big = np.abs(flat) > CANON_EPS
    # rows with every component tiny fall back to the exact rule
    big = np.where(big.any(axis=1, keepdims=True), big, flat != 0.0)
    lead = np.argmax(big, axis=1)
    flip = flat[np.arange(len(flat)), lead] < 0.0
    flat[flip] = -flat[flip]
    # a noise-level w left negative by the rule above is a signed zero
    flat[:, 0] = np.where(np.abs(flat[:, 0]) <= CANON_EPS, np.abs(flat[:, 0]), flat[:, 0])
    return flat.reshape(q.shape)


def qrotate(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Rotate points ``p`` (..., 3) by unit quaternion ``q`` (4,) via q p q^-1."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    # expanded sandwich product: p + 2w(u x p) + 2u x (u x p)
    uxp = np.cross(u, p)
    return p + 2.0 * w * uxp + 2.0 * np.cross(u, uxp)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a canonical unit quaternion."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return qcanonical(qnormalize(np.array(q)))


def axis_quat(axis: Sequence[float], theta: float) -> np.ndarray:
    """Quaternion array for a rotation of ``theta`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(theta / 2.0)], np.sin(theta / 2.0) * axis])


# --------------------------------------------------------------------------
# value types
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class UnitQuaternion:
    """Rotation as a unit quaternion, always normalized and canonical."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        q = np.array([self.w, self.x, self.y, self.z], dtype=float)
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion components must be finite")
        n = np.linalg.norm(q)
        if n < 1e-12:
            raise ZeroQuaternion("cannot build a unit quaternion from a zero vector")
        q = qcanonical(q / n)
        for name, v in zip("wxyz", q):
            object.__setattr__(self, name, float(v))

    @classmethod
    def from_array(cls, q: Sequence[float]) -> "UnitQuaternion":
        w, x, y, z = (float(v) for v in q)
        return cls(w, x, y, z)

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_axis(cls, axis: Sequence[float], degrees: float) -> "UnitQuaternion":
        return cls.from_array(axis_quat(axis, np.radians(degrees)))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def __mul__(self, other: "UnitQuaternion") -> "UnitQuaternion":
        return quat_compose(self, other)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, UnitQuaternion):
            return NotImplemented
        return bool(np.array_equal(self.array, other.array))

    def __hash__(self) -> int:
        return hash((self.w, self.x, self.y, self.z))

    def allclose(self, other: "UnitQuaternion", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.array, other.array, atol=atol, rtol=0.0))

    def inverse(self) -> "UnitQuaternion":
        return quat_inverse(self)

    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.array)

    def __repr__(self) -> str:
        return f"UnitQuaternion({self.w:.9g}, {self.x:.9g}, {self.y:.9g}, {self.z:.9g})"


@dataclass(frozen=True)
class AxisAngle:
    theta: float
    axis: tuple[float, float, float]

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(axis)
        if n < _AXIS_EPS:
            raise ValueError("axis must be nonzero")
        object.__setattr__(self, "axis", tuple(float(v) for v in axis / n))
        object.__setattr__(self, "theta", float(self.theta))

    @property
    def vector(self) -> np.ndarray:
        """Raw 4-vector (theta, vx, vy, vz)."""
        return np.array([self.theta, *self.axis])


@dataclass(frozen=True)
class EulerAngles:
    """Roll, pitch, yaw in degrees (see module docstring for the convention)."""

    alpha: float = 0.0
    beta: float = 0.0
    gamma: float = 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation followed by translation: ``p' = q p q^-1 + t`` (t in mm)."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: UnitQuaternion = field(default_factory=UnitQuaternion.identity)

    def __post_init__(self):
        t = np.array(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        t.setflags(write=False)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def apply(self, points: np.ndarray) -> np.ndarray:
        return qrotate(self.q.array, points) + self.t

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = quat_compose(self.q, other.q)
        t = qrotate(self.q.array, other.t) + self.t
        return RigidTransform(t, q)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return self.compose(other)

    def inverse(self) -> "RigidTransform":
        qi = quat_inverse(self.q)
        return RigidTransform(-qrotate(qi.array, self.t), qi)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.q.matrix()
        m[:3, 3] = self.t
        return m

    def to_dict(self) -> dict:
        return {"t": [float(v) for v in self.t], "q": [float(v) for v in self.q.array]}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.asarray(d["t"], dtype=float), UnitQuaternion.from_array(d["q"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, s: str) -> "RigidTransform":
        return cls.from_dict(json.loads(s))

    def __repr__(self) -> str:
        return f"RigidTransform(t={np.round(self.t, 6).tolist()}, q={self.q!r})"


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------

def quat_compose(a: UnitQuaternion, b: UnitQuaternion) -> UnitQuaternion:
    """Rotation ``b`` followed by ``a``."""
    return UnitQuaternion.from_array(qmul(a.array, b.array))


def quat_inverse(q: UnitQuaternion) -> UnitQuaternion:
    return UnitQuaternion(q.w, -q.x, -q.y, -q.z)


def rotate_point(q: UnitQuaternion, p: Sequence[float]) -> np.ndarray:
    return qrotate(q.array, np.asarray(p, dtype=float))


def axis_angle_to_quat(aa: AxisAngle) -> UnitQuaternion:
    return UnitQuaternion.from_array(axis_quat(aa.axis, aa.theta))


def quat_to_axis_angle(q: UnitQuaternion, eps: float = 1e-12) -> AxisAngle:
    theta = 2.0 * np.arccos(np.clip(q.w, -1.0, 1.0))
    v = np.array([q.x, q.y, q.z])
    n = np.linalg.norm(v)
    if theta <= eps or n <= eps:
        return AxisAngle(0.0, tuple(NULL_AXIS))
    # atan2 keeps precision near theta = 0 where acos(w) loses digits
    theta = 2.0 * np.arctan2(n, q.w)
    return AxisAngle(theta, tuple(v / n))


def euler_to_quat(e: EulerAngles) -> UnitQuaternion:
    a, b, g = np.radians([e.alpha, e.beta, e.gamma])
    roll = axis_quat([0, 0, 1], a)
    pitch = axis_quat([1, 0, 0], b)
    yaw = axis_quat([0, 1, 0], g)
    return UnitQuaternion.from_array(qmul(yaw, qmul(pitch, roll)))


def quat_to_euler(q: UnitQuaternion) -> EulerAngles:
    """Inverse of :func:`euler_to_quat` with pitch in [-90, 90] degrees."""
    R = q.matrix()
    beta = np.arcsin(np.clip(-R[1, 2], -1.0, 1.0))
    alpha = np.arctan2(R[1, 0], R[1, 1])
    gamma = np.arctan2(R[0, 2], R[2, 2])
    return EulerAngles(*np.degrees([alpha, beta, gamma]).tolist())


def rotation_error(q_g: UnitQuaternion, q_p: UnitQuaternion) -> float:
    """Residual rotation angle of ``q_g ∘ q_p^-1`` in degrees, in [0, 180]."""
    return float(rotation_error_array(q_g.array, q_p.array))


def rotation_error_array(q_g: np.ndarray, q_p: np.ndarray) -> np.ndarray:
    """Vectorized rotation error (degrees) for (..., 4) quaternion arrays."""
    qe = qmul(qnormalize(q_g), qconj(qnormalize(q_p)))
    # 2*atan2(|v|, |w|) == 2*acos(|w|) for unit qe, without the acos precision loss at small angles
    return np.degrees(2.0 * np.arctan2(np.linalg.norm(qe[..., 1:], axis=-1), np.abs(qe[..., 0])))


def translation_error(t_g: Sequence[float], t_p: Sequence[float]) -> float:
    """Euclidean distance, summed in x, y, z order so the value does not
    depend on the BLAS reduction order."""
    d = np.asarray(t_g, dtype=float).reshape(3) - np.asarray(t_p, dtype=float).reshape(3)
    return float(np.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]))


def transform_errors(gt: RigidTransform, pred: RigidTransform) -> tuple[float, float]:
    """(rotation error in degrees, translation error in mm)."""
    return rotation_error(gt.q, pred.q), translation_error(gt.t, pred.t)


def apply_transform(T: RigidTransform, cloud):
    """Rigidly move a :class:`~sparsereg.cloud.PointCloud`; metadata is kept."""
    return cloud.with_points(T.apply(cloud.points))


def random_quaternions(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniformly distributed canonical unit quaternions, shape (n, 4)."""
    q = qnormalize(rng.normal(size=(n, 4)))
    q[q[:, 0] < 0] *= -1.0
    return q
