"""Robust camera pose from 2D-3D matches: P3P hypotheses scored by MLESAC."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import least_squares

from .geometry import CameraIntrinsics, CameraPose, bearings, rotvec_to_matrix
from .p3p import DegenerateConfiguration, p3p_solve

logger = logging.getLogger(__name__)

INLIER_GATE = 2.5  # in units of inlier_sigma_px

LOCALIZED = "localized"
REJECTED = "rejected"


@dataclass(frozen=True)
class MlesacConfig:
    max_iterations: int = 2000
    inlier_sigma_px: float = 2.0
    search_window_px: Optional[float] = None  # None -> image diagonal
    em_iterations: int = 5
    confidence: float = 0.999
    min_inliers: int = 12
    refine: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations <= 0 or self.inlier_sigma_px <= 0 or self.em_iterations <= 0:
            raise ValueError("MLESAC iteration counts and sigma must be positive")
        if self.search_window_px is not None and self.search_window_px <= 0:
            raise ValueError("search window must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.min_inliers <= 0:
            raise ValueError("min_inliers must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "MlesacConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class LocalizationResult:
    status: str
    pose: Optional[CameraPose] = None
    inlier_ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    negative_log_likelihood: float = math.inf
    reason: Optional[str] = None
    stats: dict = field(default_factory=dict)

    @property
    def localized(self) -> bool:
        return self.status == LOCALIZED

    def to_dict(self) -> dict:
        d = {"status": self.status if self.reason is None else f"{self.status}({self.reason})",
             "rotation": None, "center": None,
             "inliers": [int(i) for i in self.inlier_ids],
             "nll": None if not math.isfinite(self.negative_log_likelihood) else float(self.negative_log_likelihood),
             "timings": {k: v for k, v in self.stats.items() if k.endswith("_s")},
             "stats": {k: v for k, v in self.stats.items() if not k.endswith("_s")}}
        if self.pose is not None:
            d.update(self.pose.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LocalizationResult":
        status = d["status"]
        reason = None
        if status.startswith(REJECTED + "("):
            reason = status[len(REJECTED) + 1:-1]
            status = REJECTED
        pose = CameraPose.from_dict(d) if d.get("rotation") is not None else None
        nll = d.get("nll")
        stats = dict(d.get("stats", {}))
        stats.update(d.get("timings", {}))
        return cls(status, pose, np.asarray(d.get("inliers", []), dtype=np.int64),
                   math.inf if nll is None else float(nll), reason, stats)


def rejected(reason: str, **stats) -> LocalizationResult:
    return LocalizationResult(REJECTED, reason=reason, stats=stats)


def reprojection_residuals(pose: CameraPose, K: CameraIntrinsics, pixels, world) -> np.ndarray:
    """Pixel distance between each projected world point and its observation; inf behind the camera."""
    Pc = pose.to_camera(np.asarray(world, dtype=float).reshape(-1, 3))
    uv = np.asarray(pixels, dtype=float).reshape(-1, 2)
    z = Pc[:, 2]
    out = np.full(len(Pc), np.inf)
    f = z > 0
    du = K.fx * Pc[f, 0] / z[f] + K.cx - uv[f, 0]
    dv = K.fy * Pc[f, 1] / z[f] + K.cy - uv[f, 1]
    out[f] = np.hypot(du, dv)
    return out


def reprojection_residual(pose: CameraPose, K: CameraIntrinsics, pixel, world_point) -> float:
    return float(reprojection_residuals(pose, K, [pixel], [world_point])[0])


def mixture_nll(residuals: np.ndarray, sigma: float, window: float, em_iterations: int):
    """Negative log-likelihood under a Gaussian-inlier / uniform-outlier mixture.

    The mixing weight is fitted by EM. Returns ``(nll, gamma)``.
    """
    r2 = np.square(residuals)
    g = np.exp(-0.5 * r2 / (sigma * sigma)) / (2 * math.pi * sigma * sigma)
    u = 1.0 / (window * window)
    gamma = 0.5
    for _ in range(em_iterations):
        pin = gamma * g
        z = pin / (pin + (1 - gamma) * u)
        gamma = float(z.mean())
    lik = gamma * g + (1 - gamma) * u
    return float(-np.log(lik).sum()), gamma


def refine_pose(pose: CameraPose, K: CameraIntrinsics, pixels, world) -> CameraPose:
    """Local least-squares refinement of the total squared reprojection error."""
    pixels = np.asarray(pixels, dtype=float)
    world = np.asarray(world, dtype=float)
    R0, C0 = pose.rotation, pose.center
    scale = max(float(np.linalg.norm(world - C0, axis=1).mean()), 1e-12)

    def fun(x):
        R = rotvec_to_matrix(x[:3]) @ R0
        Pc = (world - (C0 + scale * x[3:])) @ R.T
        z = np.where(np.abs(Pc[:, 2]) < 1e-12, 1e-12, Pc[:, 2])
        return np.concatenate([K.fx * Pc[:, 0] / z + K.cx - pixels[:, 0],
                               K.fy * Pc[:, 1] / z + K.cy - pixels[:, 1]])

    sol = least_squares(fun, np.zeros(6), method="lm", xtol=1e-12, ftol=1e-12, max_nfev=200)
    R = rotvec_to_matrix(sol.x[:3]) @ R0
    U, _, Vt = np.linalg.svd(R)
    return CameraPose(U @ Vt, C0 + scale * sol.x[3:])


def _required_iterations(w: float, confidence: float, cap: int) -> int:
    p = w ** 3
    if p >= 1.0:
        return 1
    if p <= 0.0:
        return cap
    return min(cap, int(math.ceil(math.log(1 - confidence) / math.log(1 - p))))


def mlesac_pose(pixels, world, K: CameraIntrinsics, config: MlesacConfig = MlesacConfig()) -> LocalizationResult:
    """Best P3P hypothesis under the MLESAC likelihood, refit on its inliers."""
    t0 = time.perf_counter()
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    world = np.asarray(world, dtype=float).reshape(-1, 3)
    n = len(pixels)
    if n < 4:
        return rejected("insufficient_matches", n_correspondences=n)
    rays = bearings(K, pixels)
    sigma = config.inlier_sigma_px
    window = config.search_window_px or K.diagonal
    gate = INLIER_GATE * sigma
    rng = np.random.default_rng(config.seed)

    best = None  # (nll, pose, residuals)
    needed = config.max_iterations
    it = degenerate = evaluated = 0
    while it < min(needed, config.max_iterations):
        it += 1
        sample = rng.choice(n, 3, replace=False)
        try:
            candidates = p3p_solve(world[sample], rays[sample])
        except DegenerateConfiguration:
            degenerate += 1
            continue
        for cand in candidates:
            res = reprojection_residuals(cand, K, pixels, world)
            nll, _ = mixture_nll(res, sigma, window, config.em_iterations)
            evaluated += 1
            if best is None or nll < best[0]:
                best = (nll, cand, res)
                w = float(np.mean(res < gate))
                needed = _required_iterations(w, config.confidence, config.max_iterations)

    stats = {"iterations": it, "degenerate_samples": degenerate, "hypotheses": evaluated,
             "n_correspondences": n}
    if best is None:
        stats["mlesac_s"] = time.perf_counter() - t0
        reason = "degenerate" if degenerate == it else "no_hypothesis"
        return LocalizationResult(REJECTED, reason=reason, stats=stats)

    nll, pose, res = best
    stats["best_hypothesis_nll"] = nll
    inliers = np.nonzero(res < gate)[0]
    if config.refine and len(inliers) >= 4:
        try:
            refined = refine_pose(pose, K, pixels[inliers], world[inliers])
            res_r = reprojection_residuals(refined, K, pixels, world)
            sq_before = float(np.sum(res[inliers] ** 2))
            sq_after = float(np.sum(res_r[inliers] ** 2))
            nll_r, _ = mixture_nll(res_r, sigma, window, config.em_iterations)
            if sq_after <= sq_before and nll_r <= nll:
                pose, res, nll = refined, res_r, nll_r
                inliers = np.nonzero(res < gate)[0]
                stats["refined"] = True
            else:
                stats["refined"] = False
        except (ValueError, np.linalg.LinAlgError):
            stats["refined"] = False
    stats["mlesac_s"] = time.perf_counter() - t0
    stats["inlier_count"] = int(len(inliers))
    if len(inliers) < config.min_inliers:
        return LocalizationResult(REJECTED, pose, inliers, nll, reason="too_few_inliers", stats=stats)
    return LocalizationResult(LOCALIZED, pose, inliers, nll, stats=stats)


@dataclass(frozen=True)
class MatchConfig:
    tau: float = 0.5
    top_k: int = 3
    max_candidates: Optional[int] = None

    def __post_init__(self):
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must lie in [0, 1]")
        if self.top_k <= 0:
            raise ValueError("top_k must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "MatchConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def localize(uv2d, desc2d, xyz3d, desc3d, matcher, K: CameraIntrinsics,
             match_config: MatchConfig = MatchConfig(),
             mlesac_config: MlesacConfig = MlesacConfig(), progress=None) -> LocalizationResult:
    """Match query features against the cloud, then estimate the pose robustly.

    ``inlier_ids`` of the result index the match list, which is stored in
    ``stats["matches"]`` as ``[keypoint2d_id, keypoint3d_id]`` pairs.
    """
    from .matcher import match_descriptors

    t0 = time.perf_counter()
    uv2d = np.asarray(uv2d, dtype=float).reshape(-1, 2)
    xyz3d = np.asarray(xyz3d, dtype=float).reshape(-1, 3)
    if len(desc2d) == 0 or len(desc3d) == 0:
        return rejected("no_matches", n_matches=0, match_s=time.perf_counter() - t0)
    cands = match_descriptors(matcher, desc2d, desc3d, match_config.tau, match_config.top_k,
                              progress=progress, max_candidates=match_config.max_candidates)
    t_match = time.perf_counter() - t0
    if not cands:
        return rejected("no_matches", n_matches=0, match_s=t_match)
    i2 = np.array([c.keypoint2d_id for c in cands], dtype=np.int64)
    i3 = np.array([c.keypoint3d_id for c in cands], dtype=np.int64)
    result = mlesac_pose(uv2d[i2], xyz3d[i3], K, mlesac_config)
    result.stats.update(n_matches=len(cands), n_query_keypoints=len(uv2d),
                        matches=np.column_stack([i2, i3]).tolist(), match_s=t_match,
                        total_s=time.perf_counter() - t0)
    return result
