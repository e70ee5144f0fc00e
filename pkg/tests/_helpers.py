"""Instance generators and brute-force oracles shared by the tests."""
from __future__ import annotations

import math

import numpy as np

from cloudloc.geometry import CameraIntrinsics, CameraPose, bearings, matrix_to_quat, project, random_rotation
from cloudloc.synth import descriptor_2d, descriptor_3d, signature

K_VGA = CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)


def rotation_angle(Ra, Rb) -> float:
    """Geodesic angle in radians, accurate near zero (no arccos)."""
    d = np.linalg.norm(np.asarray(Ra) - np.asarray(Rb))
    return 2.0 * math.asin(min(1.0, d / (2.0 * math.sqrt(2.0))))


def quaternion_angle_deg(Ra, Rb) -> float:
    qa, qb = matrix_to_quat(Ra), matrix_to_quat(Rb)
    return 2.0 * math.degrees(math.acos(min(1.0, abs(float(qa @ qb)))))


def p3p_instance(rng: np.random.Generator, K: CameraIntrinsics = K_VGA):
    """Random pose and three world points seen in the image at depths 2..20."""
    R = random_rotation(rng)
    C = rng.uniform(-10, 10, 3)
    uv = rng.uniform([0, 0], [K.width, K.height], (3, 2))
    b = bearings(K, uv)
    Pw = (b * rng.uniform(2, 20, 3)[:, None]) @ R + C
    return CameraPose(R, C), Pw, b


def look_at(center, target, rng: np.random.Generator) -> CameraPose:
    z = np.asarray(target, float) - center
    z /= np.linalg.norm(z)
    x = np.cross(z, rng.normal(size=3))
    x /= np.linalg.norm(x)
    return CameraPose(np.vstack([x, np.cross(z, x), z]), center)


def mlesac_instance(rng: np.random.Generator, n: int = 200, outlier_frac: float = 0.5, noise: float = 0.5,
                    K: CameraIntrinsics = K_VGA):
    """Points in a cube of diameter 20 seen by a camera 20..30 units away.

    The first ``outlier_frac * n`` pixels are replaced by uniform random pixels.
    """
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    pose = look_at(d * rng.uniform(20, 30), np.zeros(3), rng)
    pts, uvs = [], []
    while len(pts) < n:
        p = rng.uniform(-10, 10, 3) / math.sqrt(3)
        uv = project(pose, K, p)
        if uv is not None and K.contains(np.array(uv)):
            pts.append(p)
            uvs.append(uv)
    P, uv = np.array(pts), np.array(uvs)
    uv = uv + rng.normal(0, noise, uv.shape) if noise else uv
    n_out = int(outlier_frac * n)
    uv[:n_out] = rng.uniform([0, 0], [K.width, K.height], (n_out, 2))
    return pose, P, uv


def brute_knn(points, q, k, exclude=None):
    d = np.linalg.norm(points - q, axis=1)
    idx = np.arange(len(points))
    if exclude is not None:
        keep = idx != exclude
        d, idx = d[keep], idx[keep]
    o = np.lexsort((idx, d))[:k]
    return d[o], idx[o]


def brute_sor(points, k, mult):
    D = np.linalg.norm(points[:, None] - points[None], axis=2)
    np.fill_diagonal(D, np.inf)
    mean_d = np.sort(D, axis=1)[:, :k].mean(axis=1)
    return np.nonzero(mean_d > mean_d.mean() + mult * mean_d.std(ddof=1))[0]


def brute_zeta(A, B, alpha):
    D = np.linalg.norm(A[:, None] - B[None], axis=2)
    return np.argwhere(D < alpha)


def split_signature_set(rng: np.random.Generator, n_pos: int, n_neg: int, sigma: float = 0.05,
                        n_landmarks: int = 2000):
    """Labelled 2D+3D concatenations from per-landmark split signatures."""
    theta = rng.uniform(0, np.pi / 2, (n_landmarks, 16))
    sig = signature(theta)
    d3 = descriptor_3d(sig, sigma, rng)
    lp = rng.integers(0, n_landmarks, n_pos)
    Xp = np.hstack([descriptor_2d(sig[lp], sigma, rng), d3[lp]])
    a = rng.integers(0, n_landmarks, n_neg)
    b = (a + rng.integers(1, n_landmarks, n_neg)) % n_landmarks
    Xn = np.hstack([descriptor_2d(sig[a], sigma, rng), d3[b]])
    X = np.vstack([Xp, Xn]).astype(np.float32)
    y = np.r_[np.ones(n_pos), np.zeros(n_neg)].astype(np.uint8)
    return X, y


def grid_cloud(n_side: int = 10, spacing: float = 1.0) -> np.ndarray:
    g = np.arange(n_side) * spacing
    xx, yy = np.meshgrid(g, g, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)])


def cube_surface(n_per_face_side: int = 15, half: float = 1.0) -> np.ndarray:
    t = np.linspace(-half, half, n_per_face_side)
    a, b = np.meshgrid(t, t, indexing="ij")
    a, b = a.ravel(), b.ravel()
    faces = []
    for axis in range(3):
        for s in (-half, half):
            f = np.empty((a.size, 3))
            f[:, axis] = s
            f[:, (axis + 1) % 3] = a
            f[:, (axis + 2) % 3] = b
            faces.append(f)
    return np.unique(np.round(np.vstack(faces), 12), axis=0)


def random_cube_surface(n: int, rng: np.random.Generator, half: float = 1.0) -> np.ndarray:
    """Uniform random samples on the surface of an axis-aligned cube plus its 8 corners."""
    face = rng.integers(0, 6, n)
    P = rng.uniform(-half, half, (n, 3))
    P[np.arange(n), face // 2] = np.where(face % 2 == 0, -half, half)
    corners = np.array([[x, y, z] for x in (-half, half) for y in (-half, half) for z in (-half, half)])
    return np.vstack([P, corners])
