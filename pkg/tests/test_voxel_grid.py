"""Voxelization, key arithmetic, trilinear devoxelization, occupancy."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvt.errors import ConfigError, NumericError, ShapeError
from pvt.pointcloud import PointCloud, random_cloud
from pvt.voxel_grid import (SparseVoxelGrid, coords_to_keys, devoxelize,
                            keys_to_coords, lookup_rows, occupancy_stats,
                            point_to_voxel_coord, points_to_voxel_coords,
                            voxel_centers, voxelize)


def naive_voxelize_means(cloud, feats, resolution):
    """Dict-accumulation oracle for mean pooling, keyed by voxel coord."""
    sums, counts = {}, {}
    for p, f in zip(cloud.points, feats):
        key = point_to_voxel_coord(p, resolution)
        sums[key] = sums.get(key, 0.0) + f
        counts[key] = counts.get(key, 0) + 1
    return {k: sums[k] / counts[k] for k in sums}


class TestCoordinateMapping:
    def test_cube_corners_at_r4(self):
        assert point_to_voxel_coord([-1, -1, -1], 4) == (0, 0, 0)
        assert point_to_voxel_coord([1, 1, 1], 4) == (3, 3, 3)
        assert point_to_voxel_coord([0, 0, 0], 4) == (2, 2, 2)

    def test_key_roundtrip(self):
        rng = np.random.default_rng(0)
        coords = rng.integers(0, 32, size=(50, 3))
        keys = coords_to_keys(coords, 32)
        np.testing.assert_array_equal(keys_to_coords(keys, 32), coords)

    def test_key_formula(self):
        assert coords_to_keys([[1, 2, 3]], 4)[0] == 1 * 16 + 2 * 4 + 3

    def test_centers(self):
        np.testing.assert_array_equal(voxel_centers([[0, 0, 0]], 4),
                                      [[-0.75, -0.75, -0.75]])
        np.testing.assert_array_equal(voxel_centers([[3, 3, 3]], 4),
                                      [[0.75, 0.75, 0.75]])

    def test_rejects_nan(self):
        with pytest.raises(NumericError):
            points_to_voxel_coords([[0.0, np.nan, 0.0]], 4)

    def test_rejects_bad_resolution(self):
        with pytest.raises(ConfigError):
            points_to_voxel_coords([[0.0, 0.0, 0.0]], 0)


class TestVoxelize:
    def test_two_points_one_voxel_mean(self):
        cloud = PointCloud([[-0.9, -0.9, -0.9], [-0.8, -0.8, -0.8]])
        g = voxelize(cloud, [[1.0, 1.0], [3.0, 3.0]], 4)
        assert g.n_voxels == 1
        np.testing.assert_array_equal(g.features, [[2.0, 2.0]])
        np.testing.assert_array_equal(g.counts, [2])

    def test_distinct_voxels_stay_distinct(self):
        cloud = PointCloud([[-0.9, -0.9, -0.9], [0.9, 0.9, 0.9]])
        g = voxelize(cloud, [[1.0], [5.0]], 4)
        assert g.n_voxels == 2
        np.testing.assert_array_equal(g.features, [[1.0], [5.0]])

    def test_matches_dict_oracle(self):
        rng = np.random.default_rng(13)
        cloud = random_cloud(200, rng)
        feats = rng.standard_normal((200, 3))
        g = voxelize(cloud, feats, 8)
        oracle = naive_voxelize_means(cloud, feats, 8)
        assert g.n_voxels == len(oracle)
        for i in range(g.n_voxels):
            key = tuple(int(v) for v in g.coords[i])
            np.testing.assert_allclose(g.features[i], oracle[key],
                                       rtol=0, atol=1e-12)

    def test_counts_sum_to_n(self):
        rng = np.random.default_rng(4)
        cloud = random_cloud(123, rng)
        g = voxelize(cloud, rng.standard_normal((123, 2)), 16)
        assert g.counts.sum() == 123

    def test_mass_conservation(self):
        """Sum of voxel means weighted by counts equals the feature sum."""
        rng = np.random.default_rng(6)
        cloud = random_cloud(150, rng)
        feats = rng.standard_normal((150, 4))
        g = voxelize(cloud, feats, 8)
        pooled = (g.features * g.counts[:, None]).sum(axis=0)
        assert np.abs(pooled - feats.sum(axis=0)).max() <= 1e-9

    def test_point_voxel_points_home(self):
        rng = np.random.default_rng(2)
        cloud = random_cloud(80, rng)
        g = voxelize(cloud, rng.standard_normal((80, 1)), 8)
        expect = coords_to_keys(points_to_voxel_coords(cloud.points, 8), 8)
        np.testing.assert_array_equal(g.keys[g.point_voxel], expect)

    def test_keys_strictly_increasing(self):
        rng = np.random.default_rng(3)
        cloud = random_cloud(60, rng)
        g = voxelize(cloud, rng.standard_normal((60, 2)), 8)
        assert (np.diff(g.keys) > 0).all()

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_permutation_gives_bitwise_equal_grid(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 60))
        cloud = random_cloud(n, rng, feature_dim=3)
        perm = rng.permutation(n)
        g1 = voxelize(cloud, cloud.features, 4)
        g2 = voxelize(PointCloud(cloud.points[perm], cloud.features[perm]),
                      cloud.features[perm], 4)
        np.testing.assert_array_equal(g1.keys, g2.keys)
        np.testing.assert_array_equal(g1.features, g2.features)
        np.testing.assert_array_equal(g1.point_voxel, g2.point_voxel[np.argsort(perm)])

    def test_feature_shape_checked(self):
        cloud = PointCloud([[0.0, 0.0, 0.0]])
        with pytest.raises(ShapeError):
            voxelize(cloud, np.ones((2, 3)), 4)


class TestLookup:
    def test_hits_and_misses(self):
        rng = np.random.default_rng(1)
        cloud = random_cloud(40, rng)
        g = voxelize(cloud, rng.standard_normal((40, 1)), 8)
        np.testing.assert_array_equal(lookup_rows(g, g.keys),
                                      np.arange(g.n_voxels))
        missing = np.setdiff1d(np.arange(8 ** 3), g.keys)[:5]
        np.testing.assert_array_equal(lookup_rows(g, missing), -np.ones(5))


class TestDevoxelize:
    def test_exact_at_voxel_centers(self):
        rng = np.random.default_rng(10)
        cloud = random_cloud(30, rng)
        g = voxelize(cloud, rng.standard_normal((30, 2)), 4)
        centers = PointCloud(voxel_centers(g.coords, 4))
        np.testing.assert_array_equal(devoxelize(g, centers), g.features)

    def test_midpoint_blends_half_half(self):
        # Two adjacent occupied voxels along z; the midpoint of their
        # centers must get the average of the two features.
        pts = np.array([[-0.75, -0.75, -0.75], [-0.75, -0.75, -0.25]])
        g = voxelize(PointCloud(pts), np.array([[2.0], [6.0]]), 4)
        mid = PointCloud([[-0.75, -0.75, -0.5]])
        np.testing.assert_allclose(devoxelize(g, mid), [[4.0]],
                                   rtol=0, atol=1e-15)

    def test_constant_field_reproduced_exactly(self):
        """With every voxel occupied by the same value, interpolation at any
        interior position returns that value bit for bit."""
        rng = np.random.default_rng(21)
        r = 4
        centers = voxel_centers(keys_to_coords(np.arange(r ** 3), r), r)
        const = rng.standard_normal(3)
        g = voxelize(PointCloud(centers), np.tile(const, (r ** 3, 1)), r)
        # stay inside the outermost centers so all 8 corners exist
        queries = PointCloud(rng.uniform(-0.74, 0.74, size=(64, 3)))
        out = devoxelize(g, queries)
        np.testing.assert_array_equal(out, np.tile(const, (64, 1)))

    def test_weight_sum_equals_in_bounds_hit_fraction(self):
        """All-ones features: the output per point is exactly the total
        trilinear weight landing on occupied corners."""
        rng = np.random.default_rng(12)
        cloud = random_cloud(50, rng)
        g = voxelize(cloud, np.ones((50, 1)), 4)
        out = devoxelize(g, cloud)
        assert (out >= 0).all() and (out <= 1 + 1e-12).all()

    def test_nearest_mode(self):
        rng = np.random.default_rng(14)
        cloud = random_cloud(25, rng)
        g = voxelize(cloud, rng.standard_normal((25, 2)), 8)
        out = devoxelize(g, cloud, mode="nearest")
        np.testing.assert_array_equal(out, g.features[g.point_voxel])

    def test_unknown_mode(self):
        rng = np.random.default_rng(0)
        cloud = random_cloud(5, rng)
        g = voxelize(cloud, np.ones((5, 1)), 4)
        with pytest.raises(ConfigError):
            devoxelize(g, cloud, mode="cubic")


class TestOccupancy:
    def test_fully_dense_grid(self):
        r = 4
        centers = voxel_centers(keys_to_coords(np.arange(r ** 3), r), r)
        g = voxelize(PointCloud(centers), np.ones((r ** 3, 1)), r)
        stats = occupancy_stats(g, 2)
        assert stats.global_fraction == 1.0
        np.testing.assert_array_equal(stats.window_fractions, np.ones(8))

    def test_single_voxel(self):
        g = voxelize(PointCloud([[-0.9, -0.9, -0.9]]), [[1.0]], 4)
        stats = occupancy_stats(g, 2)
        assert stats.global_fraction == 1 / 64
        assert stats.window_fractions.shape == (8,)
        assert stats.window_fractions[0] == 1 / 8
        assert stats.window_fractions[1:].sum() == 0.0

    def test_window_must_divide(self):
        g = voxelize(PointCloud([[0.0, 0.0, 0.0]]), [[1.0]], 4)
        with pytest.raises(ConfigError):
            occupancy_stats(g, 3)


class TestGridValidation:
    def test_unsorted_keys_rejected(self):
        with pytest.raises(ShapeError):
            SparseVoxelGrid(4, np.array([3, 1]), np.zeros((2, 3), np.int64),
                            np.zeros((2, 1)), np.ones(2, np.int64))

    def test_out_of_range_keys_rejected(self):
        with pytest.raises(ShapeError):
            SparseVoxelGrid(2, np.array([9]), np.zeros((1, 3), np.int64),
                            np.zeros((1, 1)), np.ones(1, np.int64))

    def test_with_features_shape_guard(self):
        g = voxelize(PointCloud([[0.0, 0.0, 0.0]]), [[1.0]], 4)
        with pytest.raises(ShapeError):
            g.with_features(np.ones((1, 2)))
