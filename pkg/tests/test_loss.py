import math

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import quaternions
from sparsereg.errors import ZeroQuaternion
from sparsereg.loss import (VARIANTS, LossWeights, PosePrediction, batch_loss, grad_check, gt_rotation_target,
                            loss_axis_angle_l1, loss_axis_angle_l2, loss_fn_for, loss_quat_l1, loss_quat_l2,
                            loss_rotation_identity_check, prediction_to_transform, rotation_identity_arrays,
                            sample_smooth_point)
from sparsereg.pose_math import (RigidTransform, UnitQuaternion, quat_compose, quat_to_axis_angle,
                                 random_quaternions, rotation_error)

IDENT = RigidTransform.identity()
FIXED_500 = LossWeights(alpha=500.0, alpha_boosted=500.0)


def rand_gt(rng):
    return RigidTransform(rng.normal(0, 5, 3), UnitQuaternion.from_array(rng.normal(size=4)))


def rot_z(rad):
    return UnitQuaternion.from_array([math.cos(rad / 2), 0.0, 0.0, math.sin(rad / 2)])


class TestQuatL2:
    def test_exact_prediction_is_zero(self, rng):
        gt = rand_gt(rng)
        v = loss_quat_l2(PosePrediction(gt.t, gt.q.array), gt)
        assert v.total == 0.0 and v.singular
        assert np.array_equal(v.grads, np.zeros(7))

    def test_worked_example(self):
        # oracle: |q_g - q_p|^2 = 2 - 2 cos(theta / 2) for a pure z rotation
        expected = 1.0 + 500.0 * math.sqrt(2.0 - 2.0 * math.cos(0.01))
        v = loss_quat_l2(PosePrediction([1.0, 0.0, 0.0], rot_z(0.02).array), IDENT, FIXED_500)
        assert abs(v.total - expected) < 1e-9
        assert abs(v.total - 6.00) < 5e-3

    def test_worked_example_under_schedule(self):
        # 2 - 2cos(0.01) is just below 1e-4, so the scheduled weight is the boosted one
        v = loss_quat_l2(PosePrediction([1.0, 0.0, 0.0], rot_z(0.02).array), IDENT)
        assert v.alpha == 1e4

    def test_boost_threshold(self):
        theta = 2.0 * math.acos(1.0 - 5e-5 / 2.0)  # |q_g - q_p|^2 = 5e-5
        v = loss_quat_l2(PosePrediction(np.zeros(3), rot_z(theta).array), IDENT)
        assert v.alpha == 1e4
        v = loss_quat_l2(PosePrediction(np.zeros(3), rot_z(0.1).array), IDENT)
        assert v.alpha == 500.0

    def test_schedule_two_values(self, rng):
        w = LossWeights()
        vals = set(w.schedule(rng.uniform(0, 2e-4, 1000)).tolist())
        assert vals == {500.0, 1e4}

    def test_hemisphere_flip(self, rng):
        gt = rand_gt(rng)
        v = loss_quat_l2(PosePrediction(gt.t, -gt.q.array), gt)
        assert v.rotation_term < 1e-15

    def test_scale_invariant_in_raw_quaternion(self, rng):
        gt = rand_gt(rng)
        raw = rng.normal(size=4)
        a = loss_quat_l2(PosePrediction(gt.t, raw), gt).total
        b = loss_quat_l2(PosePrediction(gt.t, 7.5 * raw), gt).total
        assert abs(a - b) < 1e-12

    def test_total_decomposition(self, rng):
        for variant in VARIANTS:
            gt = rand_gt(rng)
            out = rng.normal(size=(50, 7))
            r = batch_loss(variant, out, np.tile(gt.t, (50, 1)), np.tile(gt_rotation_target(gt, variant), (50, 1)))
            assert np.max(np.abs(r["total"] - (r["trans"] + r["alpha"] * r["rot"]))) < 1e-12

    def test_zero_quaternion(self):
        with pytest.raises(ZeroQuaternion):
            PosePrediction(np.zeros(3), np.full(4, 1e-9))
        with pytest.raises(ZeroQuaternion):
            batch_loss("quat_l2", np.zeros((1, 7)), np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]))

    @settings(max_examples=60, deadline=None)
    @given(quaternions(), quaternions(), quaternions())
    def test_right_composition_invariance(self, g, p, r):
        a = loss_quat_l2(PosePrediction(np.zeros(3), p.array), RigidTransform(np.zeros(3), g)).rotation_term
        gr, pr = quat_compose(g, r), quat_compose(p, r)
        b = loss_quat_l2(PosePrediction(np.zeros(3), pr.array), RigidTransform(np.zeros(3), gr)).rotation_term
        assert abs(a - b) < 1e-9

    @settings(max_examples=60, deadline=None)
    @given(quaternions(), quaternions())
    def test_zero_iff_no_rotation_error(self, g, p):
        rot = loss_quat_l2(PosePrediction(np.zeros(3), p.array), RigidTransform(np.zeros(3), g)).rotation_term
        err = math.radians(rotation_error(g, p))
        # the rotation term is a function of the error angle that vanishes only at zero
        assert abs(rot - math.sqrt(2.0 - 2.0 * math.cos(err / 2.0))) < 1e-9


class TestIdentityCheck:
    def test_equal_inputs(self):
        q = UnitQuaternion.from_array([0.3, 0.1, -0.5, 0.7])
        l1, l2 = loss_rotation_identity_check(q, q)
        assert l2 == 0.0 and l1 < 1e-30

    def test_half_turn(self):
        l1, l2 = loss_rotation_identity_check(UnitQuaternion.from_axis([0, 0, 1], 90.0),
                                              UnitQuaternion.from_axis([0, 0, 1], -90.0))
        assert abs(l1 - 2.0) < 1e-12 and abs(l2 - 2.0) < 1e-12

    def test_matches_half_angle_formula(self, rng):
        g, p = random_quaternions(rng, 1000), random_quaternions(rng, 1000)
        s = np.where(np.sum(g * p, axis=1) < 0, -1.0, 1.0)
        p = p * s[:, None]
        l1, l2 = rotation_identity_arrays(g, p)
        theta = np.radians([rotation_error(UnitQuaternion.from_array(a), UnitQuaternion.from_array(b))
                            for a, b in zip(g, p)])
        assert np.max(np.abs(l2 - (2 - 2 * np.cos(theta / 2)))) < 1e-12
        assert np.max(np.abs(l1 - l2)) < 1e-12


class TestL1AndAxisAngle:
    def test_quat_l1_translation(self):
        v = loss_quat_l1(PosePrediction([1.0, 1.0, 0.0], [1, 0, 0, 0]), IDENT)
        assert v.translation_term == 2.0 and v.rotation_term == 0.0

    def test_aa_exact_is_zero(self, rng):
        gt = rand_gt(rng)
        aa = gt_rotation_target(gt, "aa_l2")
        assert loss_axis_angle_l2(gt.t, aa, gt).total == 0.0
        assert loss_axis_angle_l1(gt.t, aa, gt).total == 0.0

    def test_aa_target_is_canonical_axis_angle(self, rng):
        gt = rand_gt(rng)
        aa = quat_to_axis_angle(gt.q)
        assert np.allclose(gt_rotation_target(gt, "aa_l1"), [aa.theta, *aa.axis], atol=0)

    def test_aa_flipped_axis_penalized(self):
        gt = RigidTransform(np.zeros(3), UnitQuaternion.from_axis([0, 0, 1], 1.0))
        theta = np.radians(1.0)
        v = loss_axis_angle_l2(np.zeros(3), [theta, 0, 0, -1], gt)
        assert v.rotation_term == pytest.approx(2.0)

    def test_aa_l1_additive(self, rng):
        gt = rand_gt(rng)
        target = gt_rotation_target(gt, "aa_l1")
        d = rng.normal(size=4)
        v = loss_axis_angle_l1(gt.t + [1, -2, 0.5], target + d, gt)
        assert v.translation_term == pytest.approx(3.5, abs=1e-12)
        assert v.rotation_term == pytest.approx(np.abs(d).sum(), abs=1e-12)

    def test_prediction_to_transform(self):
        T = prediction_to_transform("aa_l2", np.array([1, 2, 3, np.pi / 2, 0, 0, 2.0]))
        assert rotation_error(T.q, UnitQuaternion.from_axis([0, 0, 1], 90.0)) < 1e-9
        assert np.array_equal(T.t, [1, 2, 3])


class TestGradients:
    def test_quadratic(self, rng):
        A = rng.normal(size=(5, 5))
        A = A @ A.T
        b = rng.normal(size=5)
        fn = lambda x: (float(0.5 * x @ A @ x + b @ x), A @ x + b)
        assert grad_check(fn, rng.normal(size=5)) < 1e-9

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_fd_agreement(self, variant, rng):
        for _ in range(20):
            gt = rand_gt(rng)
            x = sample_smooth_point(variant, gt, rng)
            assert grad_check(loss_fn_for(variant, gt), x, eps=1e-5) < 1e-5

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_zero_subgradient_at_exact(self, variant, rng):
        gt = rand_gt(rng)
        x = np.concatenate([gt.t, gt_rotation_target(gt, variant)])
        _, g = loss_fn_for(variant, gt)(x)
        assert np.array_equal(g, np.zeros(7))

    def test_radial_gradient_vanishes(self, rng):
        # scaling the raw quaternion does not change the loss
        gt = rand_gt(rng)
        x = sample_smooth_point("quat_l2", gt, rng)
        _, g = loss_fn_for("quat_l2", gt)(x)
        assert abs(g[3:] @ x[3:]) < 1e-9 * np.linalg.norm(g)

    def test_weights_scale_rotation_gradient(self, rng):
        gt = rand_gt(rng)
        x = sample_smooth_point("quat_l1", gt, rng)
        _, g1 = loss_fn_for("quat_l1", gt)(x)
        _, g2 = loss_fn_for("quat_l1", gt, LossWeights().scaled(2.0))(x)
        assert np.allclose(g2[3:], 2 * g1[3:], rtol=1e-12, atol=0)
        assert np.array_equal(g2[:3], g1[:3])


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(alpha=500, alpha_boosted=100)
