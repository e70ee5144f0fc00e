import numpy as np
import pytest

from cloudloc.features3d import (Keypoints3D, detect_harris3d, extract_rift, harris_response,
                                 rift_descriptor)
from cloudloc.geometry import random_rotation
from cloudloc.pointcloud import PointCloud, estimate_normals, intensity_and_gradient

from _helpers import cube_surface, random_cube_surface


def _prepare(points, intensities, k=12):
    c = estimate_normals(PointCloud(points, intensities=intensities), k=k)
    return intensity_and_gradient(c, k=k)


def _textured_cube(n=1500, seed=0):
    p = random_cube_surface(n, np.random.default_rng(seed))
    inten = 0.5 + 0.25 * np.sin(3 * p[:, 0] + 1) * np.cos(2 * p[:, 1]) + 0.1 * p[:, 2]
    return p, inten


def test_flat_plane_has_no_keypoints():
    rng = np.random.default_rng(0)
    p = np.column_stack([rng.uniform(-1, 1, (800, 2)), np.zeros(800)])
    c = estimate_normals(PointCloud(p), k=10, viewpoint=(0, 0, 1))
    assert len(detect_harris3d(c)) == 0


def test_empty_cloud_gives_empty_keypoints():
    assert len(detect_harris3d(PointCloud(np.empty((0, 3))))) == 0


def test_cube_corners_detected():
    p = cube_surface(15)
    c = estimate_normals(PointCloud(p), k=12)
    idx = c.index()
    radius = 0.35
    kps = detect_harris3d(c, idx, radius)
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], float)
    d = np.linalg.norm(corners[:, None] - kps.positions[None], axis=2).min(axis=1)
    assert np.all(d < radius)
    # corner neighbourhoods respond far more strongly than face interiors
    resp = harris_response(c, idx, radius)
    interior = (np.abs(p) < 1 - 2 * radius).sum(axis=1) == 2
    flat = np.nanmax(np.abs(resp[interior]))
    for corner in corners:
        near = np.linalg.norm(p - corner, axis=1) < radius / 2
        assert np.nanmax(resp[near]) > 10 * flat


def test_keypoints_sorted_by_saliency_above_threshold():
    c = estimate_normals(PointCloud(cube_surface(12)), k=12)
    kps = detect_harris3d(c, threshold=1e-4)
    assert np.all(np.diff(kps.saliency) <= 0)
    assert np.all(kps.saliency > 1e-4)


def test_keypoints_follow_rotation():
    p = random_cube_surface(1500, np.random.default_rng(5))
    R = random_rotation(np.random.default_rng(1))
    a = detect_harris3d(estimate_normals(PointCloud(p), k=12))
    b = detect_harris3d(estimate_normals(PointCloud(p @ R.T), k=12))
    assert np.array_equal(a.source_index, b.source_index)
    assert np.allclose(a.positions @ R.T, b.positions, atol=1e-6)


def test_rift_constant_intensity_is_low_energy():
    p = cube_surface(12)
    c = _prepare(p, np.full(len(p), 0.3))
    kps = Keypoints3D.from_indices(c, [0, 10, 50])
    d = extract_rift(c, kps, radius=0.5)
    assert d.valid.all()
    assert d.low_energy.all()
    assert np.all(d.values == 0)


def test_rift_row_normalization_identity():
    p, inten = _textured_cube()
    c = _prepare(p, inten)
    kps = Keypoints3D.from_indices(c, np.arange(0, len(p), 37))
    d = extract_rift(c, kps, radius=0.6)
    rows = d.values.reshape(len(kps), 4, 8).sum(axis=2)
    nonempty = (rows > 0).sum(axis=1)
    assert np.allclose(d.values.sum(axis=1), nonempty, atol=1e-9)
    assert np.all(rows <= 1 + 1e-9)
    assert np.all((d.values >= 0) & (d.values <= 1))
    assert d.dim == 32


def test_rift_too_few_neighbours_invalid():
    p, inten = _textured_cube()
    c = _prepare(p, inten)
    kps = Keypoints3D.from_indices(c, [0])
    d = extract_rift(c, kps, radius=1e-3)
    assert not d.valid[0]


def test_rift_rotation_invariance():
    p, inten = _textured_cube()
    c = _prepare(p, inten)
    R = random_rotation(np.random.default_rng(2))
    cr = _prepare(p @ R.T, inten)
    kps = detect_harris3d(c)
    kr = Keypoints3D.from_indices(cr, kps.source_index)
    a = extract_rift(c, kps, radius=0.6)
    b = extract_rift(cr, kr, radius=0.6)
    assert np.linalg.norm(a.values - b.values, axis=1).max() < 1e-6


def test_rift_deterministic():
    p, inten = _textured_cube()
    c = _prepare(p, inten)
    kps = Keypoints3D.from_indices(c, np.arange(0, len(p), 11))
    assert extract_rift(c, kps, 0.5).values.tobytes() == extract_rift(c, kps, 0.5).values.tobytes()


def test_rift_single_neighbour_bins():
    # one neighbour at half radius whose gradient points radially outward:
    # all weight lands in the angle-0 end of the second distance row
    p = np.zeros(3)
    q = np.array([[0.5, 0.0, 0.0]])
    grad = np.array([[2.0, 0.0, 0.0]])
    normals = np.array([[0.0, 0.0, 1.0]])
    h = rift_descriptor(p, q, grad, normals, radius=1.0, distance_bins=4, gradient_bins=8).reshape(4, 8)
    assert h.sum() == pytest.approx(h[1:3].sum())
    assert np.allclose(h.sum(axis=1)[1:3], 1.0)


def test_rift_requires_gradients():
    c = estimate_normals(PointCloud(cube_surface(8)), k=8)
    with pytest.raises(ValueError):
        extract_rift(c, Keypoints3D.from_indices(c, [0]), 0.5)
