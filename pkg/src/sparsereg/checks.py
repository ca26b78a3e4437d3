"""Self-checks shared by the ``losscheck`` command and the test suite."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .loss import VARIANTS, grad_check, loss_fn_for, rotation_identity_arrays, sample_smooth_point
from .pose_math import RigidTransform, UnitQuaternion, random_quaternions

LOSS_TOL = 1e-5
NETWORK_TOL = 1e-4
IDENTITY_TOL = 1e-12


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float  # worst observed error
    bound: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.value < self.bound)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: max err {self.value:.3e} (bound {self.bound:g}, {self.seconds:.2f}s)"


def same_hemisphere_pairs(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    """``n`` canonical quaternion pairs with non-negative dot product."""
    qg = random_quaternions(rng, n)
    qp = random_quaternions(rng, n)
    flip = np.sum(qg * qp, axis=1) < 0
    qp[flip] *= -1.0
    return qg, qp


def check_loss_identity(n: int = 10_000, seed: int = 0) -> CheckResult:
    """Residual-rotation distance versus plain quaternion difference."""
    start = time.perf_counter()
    qg, qp = same_hemisphere_pairs(np.random.default_rng(seed), n)
    l1, l2 = rotation_identity_arrays(qg, qp)
    return CheckResult(f"loss identity ({n} pairs)", float(np.max(np.abs(l1 - l2))), IDENTITY_TOL,
                       time.perf_counter() - start)


def random_gt(rng: np.random.Generator) -> RigidTransform:
    return RigidTransform(rng.normal(0.0, 5.0, 3), UnitQuaternion.from_array(random_quaternions(rng, 1)[0]))


def check_loss_gradients(variant: str, points: int = 100, seed: int = 0) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng([seed, VARIANTS.index(variant)])
    worst = 0.0
    for _ in range(points):
        gt = random_gt(rng)
        x = sample_smooth_point(variant, gt, rng)
        worst = max(worst, grad_check(loss_fn_for(variant, gt), x))
    return CheckResult(f"{variant} gradient ({points} points)", worst, LOSS_TOL, time.perf_counter() - start)


def check_network_gradients(points: int = 100, seed: int = 0) -> CheckResult:
    """Tiny network, loss variants taken in turn."""
    from .regressor import network_grad_check, tiny_config

    start = time.perf_counter()
    worst = 0.0
    for k in range(points):
        cfg = tiny_config(VARIANTS[k % len(VARIANTS)], seed=seed)
        worst = max(worst, network_grad_check(cfg, seed=seed * 100_003 + k))
    return CheckResult(f"network gradient ({points} points)", worst, NETWORK_TOL, time.perf_counter() - start)


def run_all_checks(points: int = 100, identity_pairs: int = 10_000, seed: int = 0) -> list[CheckResult]:
    out = [check_loss_identity(identity_pairs, seed)]
    out += [check_loss_gradients(v, points, seed) for v in VARIANTS]
    out.append(check_network_gradients(points, seed))
    return out
