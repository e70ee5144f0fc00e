import numpy as np
import pytest

from cloudloc.geometry import random_rotation
from cloudloc.pointcloud import PointCloud, estimate_normals, intensity_and_gradient, luma, sor_filter

from _helpers import brute_sor, grid_cloud


def test_cloud_validates_attribute_lengths():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), colors=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        PointCloud([[0, 0, np.inf]])


def test_subset_keeps_attributes_aligned():
    rng = np.random.default_rng(0)
    c = PointCloud(rng.normal(size=(10, 3)), colors=rng.integers(0, 255, (10, 3)), intensities=rng.uniform(size=10))
    s = c.subset(np.arange(10) % 3 == 0)
    assert len(s) == len(s.colors) == len(s.intensities) == 4
    assert np.array_equal(s.points, c.points[::3])


def test_sor_homogeneous_grid_keeps_everything():
    c = PointCloud(grid_cloud(10))
    out, removed = sor_filter(c, k=8, stddev_mult=10)
    assert len(removed) == 0 and len(out) == 100


def test_sor_removes_single_far_point():
    pts = np.vstack([grid_cloud(10), [[100.0, 100.0, 0.0]]])
    out, removed = sor_filter(PointCloud(pts), k=8, stddev_mult=1)
    assert removed.tolist() == [100]
    assert brute_sor(pts, 8, 1).tolist() == [100]


@pytest.mark.parametrize("k,mult", [(1, 0.5), (4, 1.0), (16, 2.0), (30, 0.1)])
def test_sor_matches_brute_force(k, mult):
    rng = np.random.default_rng(k)
    pts = np.vstack([rng.normal(size=(480, 3)), rng.uniform(-8, 8, (20, 3))])
    _, removed = sor_filter(PointCloud(pts), k, mult)
    assert np.array_equal(removed, brute_sor(pts, k, mult))


def test_sor_second_pass_uses_filtered_statistics():
    rng = np.random.default_rng(1)
    pts = np.vstack([rng.normal(size=(400, 3)), rng.uniform(-6, 6, (40, 3))])
    once, _ = sor_filter(PointCloud(pts), 8, 1.0)
    twice, removed2 = sor_filter(once, 8, 1.0)
    assert np.array_equal(removed2, brute_sor(once.points, 8, 1.0))
    assert len(twice) == len(once) - len(removed2)


def test_sor_rejects_large_k():
    with pytest.raises(ValueError):
        sor_filter(PointCloud(np.zeros((5, 3))), k=5)
    with pytest.raises(ValueError):
        sor_filter(PointCloud(np.random.default_rng(0).normal(size=(5, 3))), k=2, stddev_mult=0)


def test_sor_filters_attributes_consistently():
    rng = np.random.default_rng(2)
    pts = np.vstack([grid_cloud(10), [[50.0, 50.0, 50.0]]])
    cols = rng.integers(0, 255, (101, 3))
    out, removed = sor_filter(PointCloud(pts, colors=cols), 8, 1.0)
    keep = np.setdiff1d(np.arange(101), removed)
    assert np.array_equal(out.colors, cols[keep].astype(np.uint8))


def test_normals_on_plane():
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(-1, 1, (300, 2)), np.zeros(300)])
    c = estimate_normals(PointCloud(pts), k=10, viewpoint=(0, 0, 5))
    assert c.normal_valid.all()
    assert np.allclose(c.normals, [0, 0, 1], atol=1e-6)


def test_normals_on_sphere_point_inward():
    rng = np.random.default_rng(4)
    p = rng.normal(size=(2000, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    c = estimate_normals(PointCloud(p), k=12)
    close = np.linalg.norm(c.normals + p, axis=1) < 0.1
    assert close.mean() >= 0.95


def test_normals_collinear_neighbourhood_invalid():
    pts = np.column_stack([np.arange(6.0), np.zeros(6), np.zeros(6)])
    c = estimate_normals(PointCloud(pts), k=3)
    assert not c.normal_valid.any()
    assert np.all(c.normals == 0)


def test_normals_are_unit_or_flagged():
    rng = np.random.default_rng(5)
    c = estimate_normals(PointCloud(rng.normal(size=(200, 3))), k=8)
    n = np.linalg.norm(c.normals, axis=1)
    assert np.allclose(n[c.normal_valid], 1, atol=1e-9)


def test_gradient_constant_color_is_zero():
    rng = np.random.default_rng(6)
    pts = np.column_stack([rng.uniform(-1, 1, (200, 2)), np.zeros(200)])
    c = estimate_normals(PointCloud(pts, colors=np.full((200, 3), 90)), k=10, viewpoint=(0, 0, 1))
    g = intensity_and_gradient(c, k=10)
    assert np.allclose(g.gradients, 0, atol=1e-12)
    assert np.allclose(g.intensities, 90 / 255)


def test_gradient_of_linear_field_on_tilted_plane():
    rng = np.random.default_rng(7)
    uv = rng.uniform(-1, 1, (400, 2))
    pts = np.column_stack([uv, np.zeros(400)])
    c = PointCloud(pts, intensities=uv[:, 0])
    c = estimate_normals(c, k=12, viewpoint=(0, 0, 1))
    R = random_rotation(rng)
    g = intensity_and_gradient(c.transformed(R), k=12)
    interior = np.abs(uv).max(axis=1) < 0.8
    assert np.allclose(g.gradients[interior], R @ [1, 0, 0], atol=1e-6)


def test_gradient_perpendicular_to_normal():
    rng = np.random.default_rng(8)
    p = rng.normal(size=(500, 3))
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    c = estimate_normals(PointCloud(p, colors=rng.integers(0, 256, (500, 3))), k=10)
    g = intensity_and_gradient(c, k=10)
    assert np.abs(np.einsum("ij,ij->i", g.gradients, c.normals)).max() < 1e-9


def test_gradient_preconditions():
    c = PointCloud(np.random.default_rng(9).normal(size=(20, 3)))
    with pytest.raises(ValueError):
        intensity_and_gradient(c)
    with pytest.raises(ValueError):
        intensity_and_gradient(estimate_normals(c, k=4), k=4)


def test_luma_weights():
    assert luma([[255, 255, 255]])[0] == pytest.approx(1.0)
    assert luma([[255, 0, 0]])[0] == pytest.approx(0.299)
