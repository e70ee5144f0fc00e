"""Grunert's P3P solver with closed-form absolute orientation."""
from __future__ import annotations

import math

import numpy as np

from .geometry import CameraPose


class DegenerateConfiguration(ValueError):
    pass


MIN_TRIANGLE_AREA = 1e-12
_IMAG_TOL = 1e-6


def _quartic_roots(coeffs) -> np.ndarray:
    """Real roots via companion-matrix eigenvalues, each polished by Newton steps."""
    c = np.asarray(coeffs, dtype=float)
    # strip vanishing leading coefficients
    scale = np.abs(c).max()
    if scale == 0:
        return np.empty(0)
    while len(c) > 1 and abs(c[0]) < 1e-14 * scale:
        c = c[1:]
    if len(c) < 2:
        return np.empty(0)
    comp = np.diag(np.ones(len(c) - 2), -1)
    comp[0, :] = -c[1:] / c[0]
    roots = np.linalg.eigvals(comp)
    mag = np.maximum(1.0, np.abs(roots))
    real = roots.real[np.abs(roots.imag) <= _IMAG_TOL * mag]
    cl = [float(v) for v in c]
    out = []
    for r in real.tolist():
        for _ in range(2):
            f = df = 0.0
            for coef in cl:
                df = df * r + f
                f = f * r + coef
            if df == 0:
                break
            step = f / df
            r -= step
            if abs(step) <= 1e-15 * max(1.0, abs(r)):
                break
        out.append(r)
    return np.asarray(out)


def absolute_orientation(world: np.ndarray, cam: np.ndarray):
    """Rotation R and translation t minimising ``sum |R w_i + t - c_i|^2`` (no scale)."""
    mw = world.sum(axis=0) / len(world)
    mc = cam.sum(axis=0) / len(cam)
    Hm = (world - mw).T @ (cam - mc)
    U, _, Vt = np.linalg.svd(Hm)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        # best orthogonal fit is a reflection: flip the weakest singular direction
        R = Vt.T @ np.diag([1.0, 1.0, -1.0]) @ U.T
    return R, mc - R @ mw


def _polish_depths(s, cos_ab, cos_ac, cos_bc, a2, b2, c2):
    """Newton iterations on the three law-of-cosines equations in the ray depths."""
    s1, s2, s3 = (float(v) for v in s)
    for _ in range(3):
        f1 = s2 * s2 + s3 * s3 - 2 * s2 * s3 * cos_bc - a2
        f2 = s1 * s1 + s3 * s3 - 2 * s1 * s3 * cos_ac - b2
        f3 = s1 * s1 + s2 * s2 - 2 * s1 * s2 * cos_ab - c2
        # Jacobian rows; the diagonal is zero
        j12, j13 = 2 * s2 - 2 * s3 * cos_bc, 2 * s3 - 2 * s2 * cos_bc
        j21, j23 = 2 * s1 - 2 * s3 * cos_ac, 2 * s3 - 2 * s1 * cos_ac
        j31, j32 = 2 * s1 - 2 * s2 * cos_ab, 2 * s2 - 2 * s1 * cos_ab
        det = j12 * (j23 * j31) + j13 * (j21 * j32)
        if det == 0 or not math.isfinite(det):
            break
        # Cramer's rule for J @ step = f
        d1 = j23 * (j12 * f3 - j32 * f1) + j13 * j32 * f2
        d2 = j13 * (j21 * f3 - j31 * f2) + j23 * j31 * f1
        d3 = j12 * (j31 * f2 - j21 * f3) + j21 * j32 * f1
        t1, t2, t3 = d1 / det, d2 / det, d3 / det
        if not (math.isfinite(t1) and math.isfinite(t2) and math.isfinite(t3)):
            break
        s1, s2, s3 = s1 - t1, s2 - t2, s3 - t3
        if max(abs(t1), abs(t2), abs(t3)) <= 1e-15 * max(abs(s1), abs(s2), abs(s3)):
            break
    return np.array([s1, s2, s3])


def p3p_solve(world_points, bearings_) -> list[CameraPose]:
    """All camera poses consistent with three world points and their unit bearings.

    The depths ``s_i`` along the rays satisfy the law of cosines on each side
    of the world triangle. Writing ``s2 = u s1`` and ``s3 = v s1`` reduces the
    system to a quartic in ``v``; every real root with positive depths yields a
    pose. At most four poses are returned.
    """
    P = np.asarray(world_points, dtype=float).reshape(3, 3)
    f = np.asarray(bearings_, dtype=float).reshape(3, 3)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)
    (ux, uy, uz), (vx, vy, vz) = (P[1] - P[0]).tolist(), (P[2] - P[0]).tolist()
    area = 0.5 * math.sqrt((uy * vz - uz * vy) ** 2 + (uz * vx - ux * vz) ** 2 + (ux * vy - uy * vx) ** 2)
    if not area > MIN_TRIANGLE_AREA:
        raise DegenerateConfiguration("world points are collinear or coincident")

    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    cos_a = float(f[1] @ f[2])   # angle at the centre opposite side a
    cos_b = float(f[0] @ f[2])
    cos_g = float(f[0] @ f[1])

    amc = (a2 - c2) / b2
    apc = (a2 + c2) / b2
    bmc = (b2 - c2) / b2
    bma = (b2 - a2) / b2
    A4 = (amc - 1) ** 2 - 4 * c2 / b2 * cos_a ** 2
    A3 = 4 * (amc * (1 - amc) * cos_b - (1 - apc) * cos_a * cos_g + 2 * c2 / b2 * cos_a ** 2 * cos_b)
    A2 = 2 * (amc ** 2 - 1 + 2 * amc ** 2 * cos_b ** 2 + 2 * bmc * cos_a ** 2
              - 4 * apc * cos_a * cos_b * cos_g + 2 * bma * cos_g ** 2)
    A1 = 4 * (-amc * (1 + amc) * cos_b + 2 * a2 / b2 * cos_g ** 2 * cos_b - (1 - apc) * cos_a * cos_g)
    A0 = (1 + amc) ** 2 - 4 * a2 / b2 * cos_g ** 2

    poses: list[CameraPose] = []
    seen: list[np.ndarray] = []
    for v in _quartic_roots([A4, A3, A2, A1, A0]):
        if v <= 0:
            continue
        den = 1 + v * v - 2 * v * cos_b
        if den <= 0:
            continue
        s1 = np.sqrt(b2 / den)
        s3 = v * s1
        # s2 from side c; the second root of that quadratic is settled by side a
        disc = cos_g ** 2 * s1 * s1 - (s1 * s1 - c2)
        if disc < 0:
            if disc < -1e-9 * c2:
                continue
            disc = 0.0
        best = None
        for s2 in (s1 * cos_g + np.sqrt(disc), s1 * cos_g - np.sqrt(disc)):
            if s2 <= 0:
                continue
            err = abs(s2 * s2 + s3 * s3 - 2 * s2 * s3 * cos_a - a2)
            if best is None or err < best[0]:
                best = (err, s2)
        if best is None or best[0] > 1e-6 * max(a2, b2, c2):
            continue
        s = _polish_depths((s1, best[1], s3), cos_g, cos_b, cos_a, a2, b2, c2)
        if np.any(s <= 0) or not np.all(np.isfinite(s)):
            continue
        if any(np.abs(s - q).max() <= 1e-9 * s.max() for q in seen):
            continue
        seen.append(s)
        R, t = absolute_orientation(P, f * s[:, None])
        try:
            poses.append(CameraPose.from_rt(R, t))
        except ValueError:
            continue
    return poses[:4]
