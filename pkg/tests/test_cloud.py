import numpy as np
import pytest

from sparsereg.cloud import (PointCloud, downsample_map, map_to_points, pixel_centers, pixel_coords,
                             rasterize_coordinate_map, to_depth_map)
from sparsereg.errors import BadFactor, EmptyCloud
from sparsereg.synth import SUPPORT_RHO, add_noise, generate_identity, sample_dense, sparse_sample, task_rng


def grid_cloud(n=120, step=1.0, z=5.0):
    # coordinates are multiples of 1/64, so shifts by whole mm stay exact
    u = (np.arange(n) - n / 2) * step
    X, Y = np.meshgrid(u, u)
    return PointCloud(np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, z)]))


def sparse_face(seed=0):
    ident = generate_identity(seed)
    rng = task_rng(seed, 5)
    return ident, sparse_sample(add_noise(sample_dense(ident, rng=rng), rng), 1000, rng)


class TestPointCloud:
    def test_read_only(self):
        c = PointCloud(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            c.points[0, 0] = 1.0

    def test_rejects_nonfinite(self):
        with pytest.raises(ValueError):
            PointCloud(np.array([[0.0, np.inf, 0.0]]))

    def test_centroid(self):
        c = PointCloud(np.array([[0.0, 0, 0], [2, 4, 6]]))
        assert np.array_equal(c.centroid, [1, 2, 3])


class TestRasterize:
    def test_single_point_at_center(self):
        m = rasterize_coordinate_map(PointCloud(np.zeros((1, 3))), 256)
        assert m.mask.sum() == 1 and m.mask[128, 128]

    def test_pixel_convention(self):
        rc = pixel_coords(np.array([[0.0, 0.0], [0.9, -0.9]]), 256, 0.9, np.zeros(2))
        assert rc.tolist() == [[128, 128], [127, 129]]
        X, Y = pixel_centers(256, 0.9, np.zeros(2))
        assert abs(X[128, 128] - 0.45) < 1e-12 and abs(Y[128, 128] - 0.45) < 1e-12

    def test_plane_interior_constant(self):
        m = rasterize_coordinate_map(grid_cloud(step=1.5, z=7.25), 128, 1.0)
        interior = m.mask.copy()
        interior[:10] = interior[-10:] = False
        interior[:, :10] = interior[:, -10:] = False
        assert m.mask[20:108, 20:108].all()
        assert np.max(np.abs(m.xyz[..., 2][m.mask] - 7.25)) < 1e-6

    def test_empty(self):
        with pytest.raises(EmptyCloud):
            rasterize_coordinate_map(PointCloud(np.zeros((0, 3))))

    def test_small_resolution(self):
        with pytest.raises(ValueError):
            rasterize_coordinate_map(PointCloud(np.zeros((1, 3))), 8)

    def test_sparse_face_support_coverage(self):
        ident, frame = sparse_face(3)
        m = rasterize_coordinate_map(frame, 256, 1.0, origin=np.zeros(2))
        X, Y = pixel_centers(256, 1.0, np.zeros(2))
        rx, ry = ident.radii
        # support ellipse shrunk by one cell so boundary sampling gaps do not count
        support = (X / (rx * SUPPORT_RHO - 5)) ** 2 + (Y / (ry * SUPPORT_RHO - 5)) ** 2 <= 1.0
        assert m.mask[support].mean() > 0.9

    def test_values_convex(self):
        _, frame = sparse_face(1)
        m = rasterize_coordinate_map(frame)
        z = m.xyz[..., 2][m.mask]
        assert z.min() >= frame.points[:, 2].min() - 1e-9
        assert z.max() <= frame.points[:, 2].max() + 1e-9

    def test_deterministic(self):
        _, frame = sparse_face(2)
        a, b = rasterize_coordinate_map(frame), rasterize_coordinate_map(frame)
        assert np.array_equal(a.xyz, b.xyz) and np.array_equal(a.mask, b.mask)

    def test_translation_covariant(self, rng):
        pts = np.round(rng.uniform(-50, 50, (800, 3)) * 64) / 64
        base = PointCloud(pts)
        shift = np.array([5.0, -3.0, 0.0])
        a = rasterize_coordinate_map(base, 128, 1.0, origin=np.zeros(2))
        b = rasterize_coordinate_map(base.with_points(pts + shift), 128, 1.0, origin=np.zeros(2))
        # pixel (r, c) in a corresponds to (r - 3, c + 5) in b
        sa = a.mask[20:100, 20:100]
        sb = b.mask[17:97, 25:105]
        assert np.array_equal(sa, sb)
        za = a.xyz[20:100, 20:100, 2][sa]
        zb = b.xyz[17:97, 25:105, 2][sb]
        assert np.max(np.abs(za - zb)) < 1e-6


class TestDepthMap:
    def test_constant(self):
        d = to_depth_map(rasterize_coordinate_map(grid_cloud(z=3.0), 64, 2.0))
        assert np.all(d.depth[d.mask] == 3.0)

    def test_mask_and_metadata(self):
        _, frame = sparse_face(4)
        m = rasterize_coordinate_map(frame)
        d = to_depth_map(m)
        assert np.array_equal(d.mask, m.mask)
        assert d.scale == m.scale and np.array_equal(d.origin, m.origin)
        assert np.array_equal(d.depth, m.xyz[..., 2])


class TestDownsample:
    def test_factor_one(self):
        m = rasterize_coordinate_map(sparse_face(5)[1])
        d = downsample_map(m, 1)
        assert np.array_equal(d.xyz, m.xyz) and np.array_equal(d.mask, m.mask)

    def test_constant(self):
        m = rasterize_coordinate_map(grid_cloud(z=-2.0), 256, 0.9)
        d = downsample_map(m, 8)
        assert d.resolution == 32 and d.scale == pytest.approx(7.2)
        assert np.all(d.xyz[..., 2][d.mask] == -2.0)

    def test_block_mask_rule(self):
        m = rasterize_coordinate_map(sparse_face(6)[1])
        d = downsample_map(m, 8)
        any_valid = m.mask.reshape(32, 8, 32, 8).any(axis=(1, 3))
        assert np.array_equal(d.mask, any_valid)

    def test_bad_factor(self):
        m = rasterize_coordinate_map(PointCloud(np.zeros((1, 3))), 256)
        with pytest.raises(BadFactor):
            downsample_map(m, 3)

    def test_valid_z_centroid_preserved(self):
        for seed in range(5):
            m = rasterize_coordinate_map(sparse_face(seed)[1])
            d = downsample_map(m, 8)
            counts = m.mask.reshape(32, 8, 32, 8).sum(axis=(1, 3))[d.mask]
            weighted = np.sum(d.xyz[..., 2][d.mask] * counts) / counts.sum()
            assert abs(weighted - map_to_points(m)[:, 2].mean()) < 0.5
