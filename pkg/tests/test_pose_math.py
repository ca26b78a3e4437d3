import json

import numpy as np
import pytest
from hypothesis import given, settings

from conftest import quaternions, vectors
from sparsereg.cloud import PointCloud
from sparsereg.errors import ZeroQuaternion
from sparsereg.pose_math import (AxisAngle, EulerAngles, RigidTransform, UnitQuaternion, apply_transform,
                                 axis_angle_to_quat, axis_quat, euler_to_quat, qcanonical, quat_compose,
                                 quat_inverse, quat_to_axis_angle, quat_to_euler, random_quaternions,
                                 rotate_point, rotation_error, rotation_error_array, transform_errors,
                                 translation_error)


AXES = {"x": (1, 0, 0), "y": (0, 1, 0), "z": (0, 0, 1)}


def rot(axis, deg):
    return UnitQuaternion.from_axis(AXES.get(axis, axis) if isinstance(axis, str) else axis, deg)


def elementary(axis, deg):
    """Right-handed rotation matrix about a coordinate axis."""
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return {
        "x": np.array([[1, 0, 0], [0, c, -s], [0, s, c]]),
        "y": np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]]),
        "z": np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]]),
    }[axis]


class TestUnitQuaternion:
    def test_normalizes_and_canonicalizes(self):
        q = UnitQuaternion(-2.0, 0.0, 0.0, 0.0)
        assert q.array.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_zero_w_first_nonzero_positive(self):
        q = UnitQuaternion(0.0, 0.0, -1.0, 1.0)
        assert q.y > 0 and q.w == 0.0

    def test_rounding_noise_does_not_pick_hemisphere(self):
        a = UnitQuaternion(1e-300, -1.0, 0.0, 0.0)
        b = UnitQuaternion(-1e-300, 1.0, 0.0, 0.0)
        assert a.allclose(b) and a.x > 0

    def test_zero_rejected(self):
        with pytest.raises(ZeroQuaternion):
            UnitQuaternion(0.0, 0.0, 0.0, 0.0)

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            UnitQuaternion(np.nan, 0.0, 0.0, 1.0)

    @given(quaternions())
    def test_unit_and_canonical(self, q):
        a = q.array
        assert abs(np.linalg.norm(a) - 1.0) < 1e-9
        assert a[0] >= 0.0

    @given(quaternions())
    def test_canonical_idempotent(self, q):
        a = qcanonical(q.array[None])[0]
        assert np.array_equal(qcanonical(a[None])[0], a)


class TestCompose:
    def test_identity_element(self):
        q = rot([1, 2, 3], 40)
        assert quat_compose(UnitQuaternion.identity(), q).allclose(q)

    def test_inverse_law(self):
        q = rot([1, -2, 0.5], 123)
        assert quat_compose(q, quat_inverse(q)).allclose(UnitQuaternion.identity())

    def test_coaxial_angles_add(self):
        assert quat_compose(rot("z", 30), rot("z", 40)).allclose(rot("z", 70))

    @given(quaternions(), quaternions(), quaternions())
    def test_associative(self, a, b, c):
        assert quat_compose(quat_compose(a, b), c).allclose(quat_compose(a, quat_compose(b, c)))

    def test_order_b_then_a(self):
        a, b = rot("x", 90), rot("z", 90)
        p = np.array([1.0, 0.0, 0.0])
        assert np.allclose(rotate_point(quat_compose(a, b), p), rotate_point(a, rotate_point(b, p)))


class TestInverse:
    def test_identity(self):
        assert quat_inverse(UnitQuaternion.identity()).array.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_z30(self):
        assert quat_inverse(rot("z", 30)).allclose(rot("z", -30))

    @given(quaternions())
    def test_involution(self, q):
        assert quat_inverse(quat_inverse(q)).allclose(q)


class TestRotatePoint:
    def test_identity(self):
        assert np.array_equal(rotate_point(UnitQuaternion.identity(), [1, 2, 3]), [1, 2, 3])

    def test_z90(self):
        assert np.allclose(rotate_point(rot("z", 90), [1, 0, 0]), [0, 1, 0], atol=1e-15)

    @given(quaternions(), vectors())
    def test_isometry(self, q, p):
        assert abs(np.linalg.norm(rotate_point(q, p)) - np.linalg.norm(p)) < 1e-9

    @given(quaternions(), vectors())
    def test_matches_matrix(self, q, p):
        assert np.allclose(rotate_point(q, p), q.matrix() @ p, atol=1e-9)


class TestAxisAngle:
    def test_zero_angle(self):
        assert axis_angle_to_quat(AxisAngle(0.0, (1.0, 2.0, 3.0))).array.tolist() == [1.0, 0.0, 0.0, 0.0]

    def test_pi_about_z(self):
        assert np.allclose(axis_angle_to_quat(AxisAngle(np.pi, (0, 0, 1))).array, [0, 0, 0, 1], atol=1e-15)

    def test_sixty_about_x(self):
        # cos 30°, sin 30°
        expect = [np.cos(np.pi / 6), np.sin(np.pi / 6), 0.0, 0.0]
        got = axis_angle_to_quat(AxisAngle(np.pi / 3, (1, 0, 0))).array
        assert np.allclose(got, expect, atol=1e-15)
        assert np.allclose(got, [0.8660254037844386, 0.5, 0, 0])

    def test_null_rotation_axis(self):
        aa = quat_to_axis_angle(UnitQuaternion.identity())
        assert aa.theta == 0.0 and tuple(aa.axis) == (0.0, 0.0, 1.0)

    def test_half_turn(self):
        aa = quat_to_axis_angle(UnitQuaternion(0, 0, 0, 1))
        assert abs(aa.theta - np.pi) < 1e-15 and np.allclose(aa.axis, [0, 0, 1])

    def test_axis_normalized(self):
        aa = AxisAngle(0.3, (0.0, 3.0, 4.0))
        assert np.allclose(aa.axis, [0, 0.6, 0.8])
        assert np.allclose(aa.vector, [0.3, 0, 0.6, 0.8])

    @given(quaternions())
    def test_round_trip(self, q):
        aa = quat_to_axis_angle(q)
        assert 0.0 <= aa.theta <= np.pi
        assert abs(np.linalg.norm(aa.axis) - 1.0) < 1e-9
        assert axis_angle_to_quat(aa).allclose(q)


class TestEuler:
    def test_zero(self):
        assert euler_to_quat(EulerAngles(0, 0, 0)).allclose(UnitQuaternion.identity())

    def test_roll_only(self):
        assert euler_to_quat(EulerAngles(30, 0, 0)).allclose(rot("z", 30))

    def test_sequential_single_axis_oracle(self):
        p = np.array([3.0, -1.0, 2.0])
        oracle = elementary("y", 30) @ (elementary("x", 20) @ (elementary("z", 10) @ p))
        assert np.allclose(rotate_point(euler_to_quat(EulerAngles(10, 20, 30)), p), oracle, atol=1e-12)

    def test_round_trip_in_generation_box(self, rng):
        for _ in range(200):
            e = EulerAngles(*rng.uniform([-45, -20, -30], [45, 20, 30]))
            back = quat_to_euler(euler_to_quat(e))
            assert np.allclose(back.as_tuple(), e.as_tuple(), atol=1e-9)


class TestRotationError:
    def test_equal(self):
        q = rot([1, 1, 0], 77)
        assert rotation_error(q, q) == 0.0

    def test_thirty(self):
        assert abs(rotation_error(rot("z", 30), UnitQuaternion.identity()) - 30.0) < 1e-12

    def test_double_cover(self):
        q = rot([0.2, -1, 0.4], 50)
        flipped = UnitQuaternion.from_array(-q.array)
        assert flipped == q
        assert rotation_error(q, flipped) < 1e-12

    def test_matches_axis_angle_of_residual(self, rng):
        qg = random_quaternions(rng, 10_000)
        qp = random_quaternions(rng, 10_000)
        errs = rotation_error_array(qg, qp)
        for i in range(0, 10_000, 97):
            a, b = UnitQuaternion.from_array(qg[i]), UnitQuaternion.from_array(qp[i])
            theta = np.degrees(quat_to_axis_angle(quat_compose(a, quat_inverse(b))).theta)
            assert abs(errs[i] - theta) < 1e-9
            assert abs(rotation_error(a, b) - errs[i]) < 1e-9

    @given(quaternions(), quaternions())
    def test_symmetric(self, a, b):
        assert abs(rotation_error(a, b) - rotation_error(b, a)) < 1e-9

    def test_triangle_inequality(self, rng):
        q = random_quaternions(rng, 3000).reshape(1000, 3, 4)
        ab = rotation_error_array(q[:, 0], q[:, 1])
        bc = rotation_error_array(q[:, 1], q[:, 2])
        ac = rotation_error_array(q[:, 0], q[:, 2])
        assert np.all(ac <= ab + bc + 1e-6)

    def test_range(self, rng):
        errs = rotation_error_array(random_quaternions(rng, 1000), random_quaternions(rng, 1000))
        assert errs.min() >= 0.0 and errs.max() <= 180.0


class TestTranslationError:
    @pytest.mark.parametrize("tg,tp,expect", [((1, 2, 3), (1, 2, 3), 0.0), ((1, 0, 0), (0, 0, 0), 1.0),
                                              ((3, 4, 0), (0, 0, 0), 5.0)])
    def test_examples(self, tg, tp, expect):
        assert translation_error(tg, tp) == expect


class TestRigidTransform:
    def test_apply_identity(self):
        c = PointCloud(np.arange(12.0).reshape(4, 3))
        assert np.array_equal(apply_transform(RigidTransform.identity(), c).points, c.points)

    @given(quaternions(), vectors())
    @settings(max_examples=50)
    def test_inverse_round_trip(self, q, t):
        T = RigidTransform(t, q)
        pts = np.random.default_rng(0).normal(0, 50, (20, 3))
        assert np.allclose(T.inverse().apply(T.apply(pts)), pts, atol=1e-9)

    def test_rigidity(self, rng):
        T = RigidTransform(rng.normal(0, 10, 3), UnitQuaternion.from_array(random_quaternions(rng, 1)[0]))
        pts = rng.normal(0, 50, (30, 3))
        d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
        moved = apply_transform(T, PointCloud(pts)).points
        d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
        assert np.max(np.abs(d0 - d1)) < 1e-9

    def test_compose_matches_sequential(self, rng):
        A = RigidTransform(rng.normal(size=3), UnitQuaternion.from_array(random_quaternions(rng, 1)[0]))
        B = RigidTransform(rng.normal(size=3), UnitQuaternion.from_array(random_quaternions(rng, 1)[0]))
        pts = rng.normal(0, 10, (5, 3))
        assert np.allclose((A @ B).apply(pts), A.apply(B.apply(pts)))
        assert np.allclose((A @ B).matrix(), A.matrix() @ B.matrix())

    def test_json_round_trip(self):
        T = RigidTransform([1.5, -2.0, 0.25], rot([1, 2, 3], 33))
        d = json.loads(T.to_json())
        assert set(d) == {"t", "q"} and len(d["q"]) == 4
        back = RigidTransform.from_json(T.to_json())
        assert np.array_equal(back.t, T.t) and back.q == T.q

    def test_transform_errors(self):
        gt = RigidTransform([3, 4, 0], rot("z", 30))
        assert np.allclose(transform_errors(gt, RigidTransform.identity()), (30.0, 5.0))


def test_axis_quat_matches_class():
    assert np.allclose(axis_quat([0, 0, 2], np.pi / 2), rot("z", 90).array)
