import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cloudloc.geometry import CameraPose, project, random_rotation
from cloudloc.p3p import DegenerateConfiguration, absolute_orientation, p3p_solve

from _helpers import K_VGA, p3p_instance, rotation_angle


def _closest(poses, truth):
    return min(poses, key=lambda p: rotation_angle(p.rotation, truth.rotation)
               + np.linalg.norm(p.center - truth.center))


def test_identity_example():
    P = np.array([[1.0, 0, 4], [0, 1, 4], [-1, -1, 4]])
    poses = p3p_solve(P, P)
    assert 1 <= len(poses) <= 4
    best = _closest(poses, CameraPose.identity())
    assert np.allclose(best.rotation, np.eye(3), atol=1e-9)
    assert np.allclose(best.center, 0, atol=1e-9)


def test_collinear_points_rejected():
    P = np.array([[0.0, 0, 5], [1, 0, 5], [2, 0, 5]])
    with pytest.raises(DegenerateConfiguration):
        p3p_solve(P, P)
    with pytest.raises(DegenerateConfiguration):
        p3p_solve(np.array([[0.0, 0, 5]] * 3), np.eye(3))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_true_pose_recovered(seed):
    truth, Pw, b = p3p_instance(np.random.default_rng(seed))
    poses = p3p_solve(Pw, b)
    assert len(poses) <= 4
    best = _closest(poses, truth)
    # every returned pose reproduces the three bearings (positive depth, correct direction)
    for pose in poses:
        Pc = pose.to_camera(Pw)
        assert np.all(Pc[:, 2] > 0)
        assert np.allclose(Pc / np.linalg.norm(Pc, axis=1, keepdims=True), b, atol=1e-6)
    scale = np.linalg.norm(Pw - truth.center, axis=1).max()
    assert rotation_angle(best.rotation, truth.rotation) < 1e-6
    assert np.linalg.norm(best.center - truth.center) < 1e-6 * scale


def test_reprojection_within_micro_pixel():
    rng = np.random.default_rng(11)
    for _ in range(50):
        truth, Pw, b = p3p_instance(rng)
        best = _closest(p3p_solve(Pw, b), truth)
        for p in Pw:
            assert np.allclose(project(best, K_VGA, p), project(truth, K_VGA, p), atol=1e-6)


def test_absolute_orientation_exact():
    rng = np.random.default_rng(3)
    R = random_rotation(rng)
    t = rng.normal(size=3)
    W = rng.normal(size=(3, 3))
    Rh, th = absolute_orientation(W, W @ R.T + t)
    assert np.allclose(Rh, R, atol=1e-10) and np.allclose(th, t, atol=1e-10)
