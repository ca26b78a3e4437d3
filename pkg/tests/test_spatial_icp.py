import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from sparsereg.cloud import PointCloud
from sparsereg.errors import DegenerateGeometry, TooFewPoints
from sparsereg.icp import IcpConfig, IcpResult, best_rigid_transform, icp_failure_rate, icp_register
from sparsereg.pose_math import RigidTransform, UnitQuaternion, axis_quat, transform_errors
from sparsereg.spatial import VoxelHashIndex, brute_force_nn
from sparsereg.synth import generate_identity, generate_pair_set, sample_dense


class TestVoxelHash:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 400), st.floats(0.1, 50.0))
    def test_matches_kdtree(self, seed, n, spread):
        r = np.random.default_rng(seed)
        pts = r.normal(0, spread, size=(n, 3))
        # queries near the cloud and far outside it
        q = np.vstack([pts[r.integers(0, n, 50)] + r.normal(0, 0.3, (50, 3)),
                       r.normal(0, 5 * spread, (20, 3))])
        d, _ = VoxelHashIndex(pts).query(q)
        d_ref, _ = cKDTree(pts).query(q)
        assert np.allclose(d, d_ref, rtol=0, atol=1e-9)

    def test_matches_brute_force_indices(self, rng):
        pts = rng.uniform(-50, 50, (800, 3))
        q = rng.uniform(-60, 60, (300, 3))
        d, j = VoxelHashIndex(pts).query(q)
        d_b, j_b = brute_force_nn(pts, q)
        assert np.allclose(d, d_b, atol=1e-9)
        assert np.allclose(np.linalg.norm(pts[j] - q, axis=1), d, atol=1e-12)

    def test_single_point(self):
        d, j = VoxelHashIndex(np.array([[1.0, 2.0, 3.0]])).query(np.zeros((2, 3)))
        assert np.all(j == 0) and np.allclose(d, np.sqrt(14))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            VoxelHashIndex(np.zeros((0, 3)))


@pytest.fixture(scope="module")
def face():
    return sample_dense(generate_identity(21))


def small_motion(deg=5.0, t=(2.0, 0.0, 0.0)):
    axis = np.array([0.3, 1.0, 0.2])
    return RigidTransform(np.array(t), UnitQuaternion.from_array(axis_quat(axis / np.linalg.norm(axis), np.radians(deg))))


class TestKabsch:
    def test_recovers_exact_transform(self, rng):
        src = rng.normal(0, 10, (50, 3))
        T = small_motion(37.0, (1.0, -2.0, 3.0))
        est = best_rigid_transform(src, T.apply(src))
        rot, trans = transform_errors(T, est)
        assert rot < 1e-9 and trans < 1e-9

    def test_collinear_is_degenerate(self):
        line = np.outer(np.linspace(0, 1, 20), [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateGeometry):
            best_rigid_transform(line, line + 1.0)


class TestIcp:
    def test_self_registration(self, face):
        sub = PointCloud(face.points[::10])
        res = icp_register(sub, sub)
        rot, trans = transform_errors(RigidTransform.identity(), res.transform)
        assert rot < 1e-9 and trans < 1e-9
        assert res.final_residual < 1e-9 and res.converged and res.iterations <= 2

    def test_small_motion_recovered(self, face):
        T = small_motion()
        src = PointCloud(face.points[::2])
        res = icp_register(src, face.with_points(T.apply(face.points)))
        rot, trans = transform_errors(T, res.transform)
        assert rot < 0.1 and trans < 0.05

    def test_residual_monotone_and_rigid(self):
        pairs = generate_pair_set(6, "difficult", 3, pool_size=3)
        for p in pairs.pairs:
            res = icp_register(p.source, p.target)
            r = np.array(res.residuals)
            assert np.all(np.diff(r) <= 1e-9)
            assert res.iterations <= IcpConfig().max_iterations and res.final_residual >= 0
            assert abs(np.linalg.norm(res.transform.q.array) - 1.0) < 1e-12
            a = p.source.points[:40]
            b = res.transform.apply(a)
            da = np.linalg.norm(a[:, None] - a[None], axis=-1)
            db = np.linalg.norm(b[:, None] - b[None], axis=-1)
            assert np.max(np.abs(da - db)) < 1e-9

    def test_plain_variant_also_monotone(self):
        p = generate_pair_set(1, "standard", 4, pool_size=1).pairs[0]
        res = icp_register(p.source, p.target, IcpConfig(center_init=False, accelerate=False))
        assert np.all(np.diff(res.residuals) <= 1e-9)

    def test_deterministic(self):
        p = generate_pair_set(1, "standard", 5, pool_size=1).pairs[0]
        a, b = icp_register(p.source, p.target), icp_register(p.source, p.target)
        assert np.array_equal(a.transform.t, b.transform.t)
        assert np.array_equal(a.transform.q.array, b.transform.q.array)
        assert a.residuals == b.residuals

    def test_too_few_points(self, face):
        small = PointCloud(face.points[:9])
        with pytest.raises(TooFewPoints):
            icp_register(small, face)

    def test_degenerate(self):
        line = PointCloud(np.outer(np.linspace(-10, 10, 30), [1.0, 0.0, 0.0]))
        with pytest.raises(DegenerateGeometry):
            icp_register(line, line.with_points(line.points + [0.0, 1.0, 0.0]))

    def test_result_json(self, face):
        res = icp_register(PointCloud(face.points[::20]), PointCloud(face.points[::20]))
        d = res.to_dict()
        assert set(d) == {"transform", "iterations", "final_residual", "converged"}
        back = RigidTransform.from_dict(d["transform"])
        assert np.array_equal(back.t, res.transform.t) and back.q.allclose(res.transform.q, atol=0.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            IcpConfig(trim_fraction=1.0)


class TestFailureRate:
    def test_all_exact(self):
        gt = small_motion()
        assert icp_failure_rate([(gt, gt)] * 4) == 0.0

    def test_one_of_four(self):
        gt = RigidTransform.identity()
        bad = RigidTransform(np.zeros(3), UnitQuaternion.from_axis([0, 0, 1], 90.0))
        res = IcpResult(bad, 1, 0.0, True)
        assert icp_failure_rate([(gt, gt), (gt, gt), (res, gt), (gt, gt)]) == 0.25

    def test_empty(self):
        with pytest.raises(ValueError):
            icp_failure_rate([])
