import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import cKDTree

from gpdistill.cloud import (DEFAULT_COLOR, Point3, PointCloud, estimate_normals, load_cloud,
                             save_cloud, voxel_downsample)
from gpdistill.exceptions import EmptyCloudError, MalformedInputError, ParameterError


def _angle_deg(a, b):
    cos = np.abs(np.sum(a * b, axis=-1)) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.degrees(np.arccos(np.clip(cos, -1, 1)))


class TestPoint3:
    def test_unit_normal_accepted(self):
        p = Point3([0, 0, 1], [1, 2, 3], [0, 0, 1])
        assert p.normal.tolist() == [0, 0, 1]

    def test_non_unit_normal_rejected(self):
        with pytest.raises(ParameterError):
            Point3([0, 0, 1], [1, 2, 3], [0, 0, 2])

    def test_nonfinite_position_rejected(self):
        with pytest.raises(ParameterError):
            Point3([np.nan, 0, 1], [1, 2, 3])

    def test_cloud_indexing_returns_point(self):
        cloud = PointCloud([[1, 2, 3], [4, 5, 6]])
        p = cloud[1]
        assert isinstance(p, Point3)
        assert p.color.tolist() == list(DEFAULT_COLOR)

    def test_from_points_round_trip(self):
        pts = [Point3([0, 0, i], [i, 0, 0], [1, 0, 0]) for i in range(4)]
        cloud = PointCloud.from_points(pts, "f")
        assert len(cloud) == 4 and cloud.has_normals
        assert cloud.frame_id == "f"


class TestLoadCloud:
    def test_csv_with_colors(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("0,0,1,255,0,0\n1,0,1,0,255,0\n0,1,1,0,0,255\n")
        cloud = load_cloud(path)
        assert len(cloud) == 3
        np.testing.assert_array_equal(cloud.colors, [[255, 0, 0], [0, 255, 0], [0, 0, 255]])

    def test_csv_header_comments_and_default_color(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("# a comment\nx,y,z\n0,0,1\n\n1,1,1\n")
        cloud = load_cloud(path)
        assert len(cloud) == 2
        np.testing.assert_array_equal(cloud.colors, [DEFAULT_COLOR] * 2)

    def test_csv_bad_field_names_line(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("0,0,1\n0,zero,1\n")
        with pytest.raises(MalformedInputError) as info:
            load_cloud(path)
        assert info.value.line == 2

    def test_csv_wrong_width(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("0,0,1\n0,0\n")
        with pytest.raises(MalformedInputError) as info:
            load_cloud(path)
        assert info.value.line == 2

    def test_empty_csv(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("x,y,z\n")
        with pytest.raises(EmptyCloudError):
            load_cloud(path)

    def test_ply_zero_vertices(self, tmp_path):
        path = tmp_path / "c.ply"
        path.write_text("ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\n"
                        "property float y\nproperty float z\nend_header\n")
        with pytest.raises(EmptyCloudError):
            load_cloud(path)

    def test_ply_binary_rejected(self, tmp_path):
        path = tmp_path / "c.ply"
        path.write_text("ply\nformat binary_little_endian 1.0\nelement vertex 1\nend_header\n")
        with pytest.raises(MalformedInputError):
            load_cloud(path)

    def test_unknown_format(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("0,0,1\n")
        with pytest.raises(ParameterError):
            load_cloud(path, format="xyz")

    @pytest.mark.parametrize("suffix", ["csv", "ply"])
    def test_round_trip(self, tmp_path, suffix):
        rng = np.random.default_rng(0)
        cloud = PointCloud(rng.uniform(-2, 2, (200, 3)), rng.integers(0, 256, (200, 3)))
        path = tmp_path / f"c.{suffix}"
        save_cloud(cloud, path)
        back = load_cloud(path)
        assert len(back) == len(cloud)
        assert np.max(np.abs(back.positions - cloud.positions)) < 1e-6
        np.testing.assert_array_equal(back.colors, cloud.colors)


class TestEstimateNormals:
    def test_plane_normals_point_toward_origin(self):
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(-1, 1, 500), rng.uniform(-1, 1, 500), np.zeros(500)])
        pts[:, 2] = 0.0
        out = estimate_normals(PointCloud(pts + [0, 0, -2]), k=12)
        assert np.all(_angle_deg(out.normals, np.array([0, 0, 1.0])) < 1.0)
        assert np.all(out.normals[:, 2] > 0)

    def test_sphere_normals_match_radial(self):
        rng = np.random.default_rng(2)
        d = rng.normal(size=(2000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        center = np.array([0, 0, 3.0])
        out = estimate_normals(PointCloud(center + d), k=12)
        ang = _angle_deg(out.normals, d)
        assert np.mean(ang < 5.0) >= 0.95

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(300, 3)) * [1, 1, 0.05]
        far = np.array([1e3, 1e3, 1e3])
        a = estimate_normals(PointCloud(pts), viewpoint=(0, 0, 5)).normals
        b = estimate_normals(PointCloud(pts + far), viewpoint=far + (0, 0, 5)).normals
        assert np.max(_angle_deg(a, b)) < 1e-3

    def test_normals_are_unit(self):
        rng = np.random.default_rng(4)
        out = estimate_normals(PointCloud(rng.normal(size=(100, 3))), k=5)
        np.testing.assert_allclose(np.linalg.norm(out.normals, axis=1), 1.0, atol=1e-12)

    def test_k_exceeds_points(self):
        with pytest.raises(ParameterError):
            estimate_normals(PointCloud(np.eye(3)), k=5)

    def test_k_below_three(self):
        with pytest.raises(ParameterError):
            estimate_normals(PointCloud(np.eye(3)), k=2)


class TestVoxelDownsample:
    cube = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)

    def test_single_cell_centroid(self):
        grid = voxel_downsample(PointCloud(self.cube), 2.0)
        assert len(grid) == 1
        np.testing.assert_allclose(grid.positions[0], [0.5, 0.5, 0.5])

    def test_one_point_per_cell(self):
        grid = voxel_downsample(PointCloud(self.cube), 0.4)
        assert len(grid) == 8

    def test_bad_leaf(self):
        with pytest.raises(ParameterError):
            voxel_downsample(PointCloud(self.cube), 0.0)

    def test_mean_color_and_counts(self):
        cloud = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], [[0, 0, 0], [100, 50, 10]])
        grid = voxel_downsample(cloud, 1.0)
        np.testing.assert_allclose(grid.colors[0], [50, 25, 5])
        assert grid.counts.tolist() == [2]

    def test_opposing_normals_fall_back(self):
        cloud = PointCloud([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]], None, [[0, 0, 1], [0, 0, -1]])
        grid = voxel_downsample(cloud, 1.0)
        np.testing.assert_allclose(grid.normals[0], [0, 0, 1])

    def test_representatives_near_inputs(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(0, 1, (10000, 3))
        leaf = 0.05
        grid = voxel_downsample(PointCloud(pts), leaf)
        d, _ = cKDTree(pts).query(grid.positions)
        assert np.all(d <= leaf * np.sqrt(3) / 2)
        assert len(grid) <= len(pts)

    def test_cells_map(self):
        grid = voxel_downsample(PointCloud(self.cube), 0.4)
        cells = grid.cells
        assert (2, 2, 2) in cells and isinstance(cells[(0, 0, 0)], Point3)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300), st.floats(0.01, 0.5), st.integers(0, 10_000))
    def test_representative_inside_cell(self, n, leaf, seed):
        pts = np.random.default_rng(seed).uniform(-1, 1, (n, 3))
        grid = voxel_downsample(PointCloud(pts), leaf)
        lo = grid.keys * leaf
        assert np.all(grid.positions >= lo) and np.all(grid.positions < lo + leaf)
        assert grid.counts.sum() == n

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 300), st.floats(0.01, 0.5), st.integers(0, 10_000))
    def test_idempotent(self, n, leaf, seed):
        pts = np.random.default_rng(seed).uniform(-1, 1, (n, 3))
        grid = voxel_downsample(PointCloud(pts), leaf)
        again = voxel_downsample(grid.to_cloud(), leaf)
        np.testing.assert_array_equal(again.keys, grid.keys)
