import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from biomass3d.numerics import make_rng
from biomass3d.pointdata import (PointCloud, PointCloudParseError, SparseVoxelGrid, VoxelizationError,
                                 augment_motion, augment_rotate, compute_3dvi, grid_dims, load_point_cloud,
                                 voxelize)


def pairwise(x):
    return np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(-1))


def test_load_xyz(tmp_path):
    p = tmp_path / "a.xyz"
    p.write_text("0 0 0\n1 2 3\n4 5 6\n")
    pc = load_point_cloud(p)
    assert pc.n == 3 and pc.f == 0
    assert np.array_equal(pc.xyz[1], [1, 2, 3])


def test_load_ply_colors(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
        "0 0 0 255 0 51\n1 1 1 0 255 0\n"
    )
    pc = load_point_cloud(p)
    assert pc.f == 3
    assert pc.feature_names == ("red", "green", "blue")
    assert np.allclose(pc.features[0], [1.0, 0.0, 0.2])


def test_load_bad_row_names_line(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 2\n")
    with pytest.raises(PointCloudParseError) as err:
        load_point_cloud(p)
    assert err.value.line == 2
    assert ":2:" in str(err.value)


def test_load_nonfinite(tmp_path):
    p = tmp_path / "bad.xyz"
    p.write_text("0 0 0\n1 nan 2\n")
    with pytest.raises(PointCloudParseError):
        load_point_cloud(p)


def test_ply_truncated(tmp_path):
    p = tmp_path / "t.ply"
    p.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nproperty float y\n"
                 "property float z\nend_header\n0 0 0\n")
    with pytest.raises(PointCloudParseError):
        load_point_cloud(p)


def test_voxel_mean():
    pc = PointCloud(np.array([[0.1, 0.1, 0.1, 1.0], [0.2, 0.2, 0.2, 3.0]]))
    g = voxelize(pc, (1, 1, 1), (0.5, 0.5, 0.5))
    assert g.n_active == 1
    assert g.features[0, 3] == 2.0
    assert np.allclose(g.features[0, :3], [0.15, 0.15, 0.15])


def test_reference_grid_dims():
    assert grid_dims((16, 4, 1.5), (0.08, 0.05, 0.075)) == (200, 80, 20)
    assert grid_dims((1, 1, 1), (0.008, 0.008, 0.025)) == (125, 125, 40)


def test_half_open_cells():
    pc = PointCloud(np.array([[0.5, 0.0, 0.0], [0.4999999, 0.0, 0.0]]))
    g = voxelize(pc, (1, 1, 1), (0.5, 0.5, 0.5))
    assert sorted(g.coords[:, 0].tolist()) == [0, 1]


def test_outside_points_dropped_and_counted():
    pc = PointCloud(np.array([[0.1, 0.1, 0.1], [2.0, 0.1, 0.1], [-0.1, 0.1, 0.1]]))
    g = voxelize(pc, (1, 1, 1), (0.5, 0.5, 0.5))
    assert g.dropped == 2 and g.n_active == 1


def test_voxelize_errors():
    with pytest.raises(VoxelizationError):
        voxelize(PointCloud(np.zeros((0, 3))), (1, 1, 1), (0.5, 0.5, 0.5))
    with pytest.raises(VoxelizationError):
        voxelize(PointCloud(np.array([[5.0, 5, 5]])), (1, 1, 1), (0.5, 0.5, 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_voxelize_permutation_invariant(seed):
    rng = make_rng(seed)
    pts = rng.uniform(0, 1, (50, 4))
    a = voxelize(PointCloud(pts), (1, 1, 1), (0.25, 0.25, 0.25))
    b = voxelize(PointCloud(pts[rng.permutation(50)]), (1, 1, 1), (0.25, 0.25, 0.25))
    assert np.array_equal(a.coords, b.coords)
    assert np.allclose(a.features, b.features, rtol=0, atol=1e-15)
    assert a.n_active <= 50


def test_3dvi():
    g = SparseVoxelGrid((10, 10, 1), np.array([[i, 0, 0] for i in range(5)]), np.zeros((5, 3)))
    assert compute_3dvi(g) == 0.05
    full = SparseVoxelGrid((2, 1, 1), np.array([[0, 0, 0], [1, 0, 0]]), np.zeros((2, 3)))
    assert compute_3dvi(full) == 1.0
    empty = SparseVoxelGrid((2, 2, 2), np.zeros((0, 3)), np.zeros((0, 3)))
    assert compute_3dvi(empty) == 0.0
    with pytest.raises(VoxelizationError):
        compute_3dvi(SparseVoxelGrid((0, 2, 2), np.zeros((0, 3)), np.zeros((0, 3))))


def test_rotate_zero_ranges_identity(rng):
    pc = PointCloud(rng.uniform(0, 1, (20, 5)))
    out = augment_rotate(pc, rng, ranges=(0, 0, 0))
    assert np.array_equal(out.points, pc.points)


def test_rotate_about_z_analytic():
    class Fixed:
        def uniform(self, lo, hi):
            return hi

    pc = PointCloud(np.array([[1.0, 0.0, 0.0]]))
    out = augment_rotate(pc, Fixed(), ranges=(0, 0, math.pi / 12), center=(0, 0, 0))
    assert np.allclose(out.xyz[0], [math.cos(math.pi / 12), math.sin(math.pi / 12), 0.0], atol=1e-15)


def test_rotate_preserves_distances_and_features():
    for seed in range(10):
        rng = make_rng(seed)
        pc = PointCloud(rng.uniform(-2, 2, (30, 4)))
        out = augment_rotate(pc, rng)
        assert np.abs(pairwise(out.xyz) - pairwise(pc.xyz)).max() < 1e-9
        assert np.array_equal(out.features, pc.features)


def test_motion_identity_and_rigid(rng):
    pc = PointCloud(rng.uniform(0, 1, (10, 3)))
    assert np.array_equal(augment_motion(pc, rng, sigma=0.0).points, pc.points)
    out = augment_motion(pc, rng)
    assert np.allclose(pairwise(out.xyz), pairwise(pc.xyz), atol=1e-12)


def test_motion_mean_over_seeds():
    pc = PointCloud(np.zeros((1, 3)))
    offsets = np.array([augment_motion(pc, make_rng(s)).xyz[0] for s in range(10_000)])
    assert np.all(np.abs(offsets.mean(axis=0)) < 0.05)
    assert np.allclose(offsets.std(axis=0), 1.0, atol=0.05)


def test_voxelize_after_zero_augment_unchanged(rng):
    pc = PointCloud(rng.uniform(0.1, 0.9, (40, 3)))
    a = voxelize(pc, (1, 1, 1), (0.1, 0.1, 0.1))
    aug = augment_motion(augment_rotate(pc, rng, ranges=(0, 0, 0)), rng, sigma=0.0)
    b = voxelize(aug, (1, 1, 1), (0.1, 0.1, 0.1))
    assert np.array_equal(a.coords, b.coords) and np.array_equal(a.features, b.features)
