"""Camera model, pose types and the two localization error metrics.

Conventions
-----------
Poses map world to camera: ``p_cam = R @ (p_world - C)``, where ``R`` is the
world-to-camera rotation and ``C`` the camera center in world coordinates.
The camera looks down +z, image u grows to the right and v grows downward.
Lens distortion is not modelled.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

ORTHO_TOL = 1e-9


def _as_vec3(p) -> np.ndarray:
    v = np.asarray(p, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite point: {v}")
    return v


def is_rotation(R: np.ndarray, tol: float = ORTHO_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    (a, b, c), (d, e, f), (g, h, i) = R.tolist()
    det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
    return abs(det - 1.0) <= tol and np.abs(R.T @ R - np.eye(3)).max() <= tol


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix from a quaternion ``(w, x, y, z)``; q is normalized first."""
    q = np.asarray(q, dtype=float).reshape(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` with ``w >= 0`` (Shepperd's method)."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def axis_angle(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about ``axis`` by ``angle`` radians."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1 - math.cos(angle)) * (K @ K)


def rotvec_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta < 1e-15:
        return np.eye(3)
    return axis_angle(w / theta, theta)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniformly distributed rotation (normalized Gaussian quaternion)."""
    return quat_to_matrix(rng.normal(size=4))


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Closest rotation matrix in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        if not is_rotation(R, 1e-6):
            raise ValueError("rotation is not orthonormal with det +1")
        R.setflags(write=False)
        C = _as_vec3(self.center).copy()
        C.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "center", C)

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rt(cls, R, t) -> "CameraPose":
        """Pose from ``p_cam = R p + t``."""
        R = np.asarray(R, dtype=float)
        return cls(R, -R.T @ np.asarray(t, dtype=float))

    @property
    def translation(self) -> np.ndarray:
        return -self.rotation @ self.center

    @property
    def viewing_direction(self) -> np.ndarray:
        """Optical axis in world coordinates."""
        return self.rotation[2].copy()

    def to_camera(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=float)
        return (P - self.center) @ self.rotation.T

    def to_dict(self) -> dict:
        return {"rotation": [float(v) for v in self.rotation.reshape(-1)],
                "center": [float(v) for v in self.center]}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(np.asarray(d["rotation"], dtype=float).reshape(3, 3),
                   np.asarray(d["center"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def contains(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return ((uv[..., 0] >= 0) & (uv[..., 0] < self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] < self.height))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


def project(pose: CameraPose, K: CameraIntrinsics, p) -> Optional[tuple[float, float]]:
    """Pixel of world point ``p``, or None when it is not in front of the camera."""
    X, Y, Z = pose.rotation @ (_as_vec3(p) - pose.center)
    if Z <= 0:
        return None
    return (K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy)


def project_many(pose: CameraPose, K: CameraIntrinsics, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns ``(uv, in_front)``; uv rows for points
    behind the camera are NaN."""
    Pc = pose.to_camera(points)
    z = Pc[:, 2]
    front = z > 0
    uv = np.full((len(Pc), 2), np.nan)
    zf = z[front]
    uv[front, 0] = K.fx * Pc[front, 0] / zf + K.cx
    uv[front, 1] = K.fy * Pc[front, 1] / zf + K.cy
    return uv, front


def bearing(K: CameraIntrinsics, pixel) -> np.ndarray:
    """Unit ray through ``pixel`` in the camera frame."""
    u, v = pixel
    b = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
    return b / np.linalg.norm(b)


def bearings(K: CameraIntrinsics, pixels) -> np.ndarray:
    uv = np.asarray(pixels, dtype=float).reshape(-1, 2)
    b = np.column_stack([(uv[:, 0] - K.cx) / K.fx, (uv[:, 1] - K.cy) / K.fy, np.ones(len(uv))])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def rotation_error_deg(Rg: np.ndarray, Rp: np.ndarray) -> float:
    """Geodesic angle ``arccos((trace(Rg Rp^T) - 1) / 2)`` between two rotations, in degrees."""
    M = np.asarray(Rg, dtype=float) @ np.asarray(Rp, dtype=float).T
    c = (np.trace(M) - 1.0) / 2.0
    # sin of the same angle from the antisymmetric part; atan2 stays accurate
    # near 0 and 180 degrees where arccos(c) loses half the digits
    s = 0.5 * math.sqrt((M[2, 1] - M[1, 2]) ** 2 + (M[0, 2] - M[2, 0]) ** 2 + (M[1, 0] - M[0, 1]) ** 2)
    return math.degrees(math.atan2(s, min(1.0, max(-1.0, c))))


def viewing_direction_error_deg(Rg: np.ndarray, Rp: np.ndarray) -> float:
    """Angle between optical axes; ignores roll about the axis. Diagnostic only."""
    c = float(np.dot(np.asarray(Rg)[2], np.asarray(Rp)[2]))
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def position_error(Cg, Cp) -> float:
    return float(np.linalg.norm(_as_vec3(Cg) - _as_vec3(Cp)))
