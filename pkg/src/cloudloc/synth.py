"""Synthetic indoor scene with known poses and split-signature descriptors.

Landmarks lie on the inner surfaces of a box-shaped room and cameras stand
inside it, so every landmark in the frustum is visible. Each landmark owns a
latent 160-D signature; its 2D descriptors are noisy copies of the first 128
dims and its 3D descriptor a noisy copy of the last 32, which makes
concatenations of true pairs learnable without being trivially equal.

A fraction of the landmarks are distractors: they appear in the dense cloud
with 3D descriptors but are never observed by any camera.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .formats import DescriptorFile, write_descriptors
from .geometry import CameraIntrinsics, CameraPose, axis_angle, project_many
from .mining import TrackStore
from .ply import write_ply
from .pointcloud import PointCloud

logger = logging.getLogger(__name__)

N_ANGLES = 16
DIM2D = 128
DIM3D = 32
SIGNATURE_DIM = DIM2D + DIM3D


@dataclass(frozen=True)
class SynthConfig:
    n_landmarks: int = 2000
    n_train: int = 30
    n_query: int = 10
    sigma_2d: float = 0.05
    sigma_3d: float = 0.05
    distractor_fraction: float = 0.3
    pixel_noise: float = 0.5
    room: tuple = (20.0, 20.0, 6.0)
    intrinsics: tuple = (500.0, 500.0, 320.0, 240.0, 640, 480)
    camera_region: float = 0.5          # cameras stay within this fraction of the floor plan
    max_pitch_deg: float = 10.0
    max_roll_deg: float = 5.0
    image_margin_px: float = 3.0
    min_visible: int = 40
    max_regenerations: int = 50
    keypoint_jitter: float = 0.01       # dense keypoint offset from its landmark
    sparse_noise: float = 0.005         # triangulated sparse point offset from its landmark
    n_filler: int = 20000
    outlier_fraction: float = 0.01
    clutter_fraction: float = 0.0       # extra 2D keypoints per image with no 3D counterpart

    def __post_init__(self):
        if self.n_landmarks <= 0 or self.n_train <= 0 or self.n_query < 0:
            raise ValueError("landmark and view counts must be positive")
        if not 0 <= self.distractor_fraction < 1:
            raise ValueError("distractor_fraction must lie in [0, 1)")
        if min(self.sigma_2d, self.sigma_3d, self.pixel_noise, self.keypoint_jitter, self.sparse_noise) < 0:
            raise ValueError("noise levels must be non-negative")
        if not 0 < self.camera_region <= 1:
            raise ValueError("camera_region must lie in (0, 1]")

    @property
    def K(self) -> CameraIntrinsics:
        fx, fy, cx, cy, w, h = self.intrinsics
        return CameraIntrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.room))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["room"] = list(self.room)
        d["intrinsics"] = list(self.intrinsics)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for k in ("room", "intrinsics"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class ImageFeatures:
    uv: np.ndarray              # (n, 2)
    descriptors: np.ndarray     # (n, 128) float32
    landmark: np.ndarray        # (n,) landmark id, -1 for clutter
    scale: np.ndarray
    orientation: np.ndarray


@dataclass
class SyntheticScene:
    config: SynthConfig
    seed: int
    landmarks: np.ndarray       # (L, 3)
    signatures: np.ndarray      # (L, 160)
    distractor: np.ndarray      # (L,) bool
    keypoints3d: np.ndarray     # (L, 3) dense-cloud keypoint per landmark
    descriptors3d: np.ndarray   # (L, 32) float32
    sparse_points: np.ndarray   # (L, 3)
    poses: dict                 # image id -> CameraPose
    train_ids: list
    query_ids: list
    features: dict              # image id -> ImageFeatures
    dense: PointCloud = field(repr=False, default=None)

    @property
    def K(self) -> CameraIntrinsics:
        return self.config.K

    @property
    def diameter(self) -> float:
        return self.config.diameter

    def track_store(self) -> TrackStore:
        """SfM-style tracks: one sparse point per observed landmark, all images included."""
        obs: dict = {}
        for img in self.train_ids + self.query_ids:
            f = self.features[img]
            for lm, (u, v) in zip(f.landmark, f.uv):
                if lm >= 0:
                    obs.setdefault(int(lm), []).append((img, float(u), float(v)))
        ids = sorted(obs)
        K = self.K
        return TrackStore(self.sparse_points[ids], [obs[i] for i in ids], dict(self.poses),
                          {img: K for img in self.poses})


def signature(theta: np.ndarray) -> np.ndarray:
    """Noise-free 160-D signatures for angle vectors ``theta`` of shape (n, 16)."""
    theta = np.atleast_2d(theta)
    two = np.tile(np.concatenate([np.cos(theta), np.sin(theta)], axis=1), (1, DIM2D // (2 * N_ANGLES)))
    z = theta / (np.pi / 2)
    three = np.stack([z, 1 - z], axis=-1).reshape(len(theta), DIM3D)
    return np.hstack([two, three])


def descriptor_2d(sig: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    v = np.atleast_2d(sig)[:, :DIM2D]
    if sigma > 0:
        v = v + rng.normal(0.0, sigma, v.shape)
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)


def descriptor_3d(sig: np.ndarray, sigma: float, rng: np.random.Generator, rows: int = 4) -> np.ndarray:
    v = np.atleast_2d(sig)[:, DIM2D:].reshape(-1, rows, DIM3D // rows)
    if sigma > 0:
        v = np.clip(v + rng.normal(0.0, sigma, v.shape), 0.0, None)
    s = v.sum(axis=2, keepdims=True)
    v = np.divide(v, s, out=np.zeros_like(v), where=s > 0)
    return v.reshape(-1, DIM3D).astype(np.float32)


def _surface_samples(n: int, room, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples over the six inner faces of the room, by area."""
    wx, wy, h = room
    hx, hy = wx / 2, wy / 2
    areas = np.array([wy * h, wy * h, wx * h, wx * h, wx * wy, wx * wy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    a = rng.uniform(0, 1, n)
    b = rng.uniform(0, 1, n)
    P = np.empty((n, 3))
    for f in range(6):
        m = face == f
        if f < 2:
            P[m] = np.column_stack([np.full(m.sum(), hx if f == 0 else -hx), (a[m] - 0.5) * wy, b[m] * h])
        elif f < 4:
            P[m] = np.column_stack([(a[m] - 0.5) * wx, np.full(m.sum(), hy if f == 2 else -hy), b[m] * h])
        else:
            P[m] = np.column_stack([(a[m] - 0.5) * wx, (b[m] - 0.5) * wy, np.full(m.sum(), 0.0 if f == 4 else h)])
    return P


def _random_camera(cfg: SynthConfig, rng: np.random.Generator) -> CameraPose:
    wx, wy, h = cfg.room
    c = np.array([rng.uniform(-0.5, 0.5) * wx * cfg.camera_region,
                  rng.uniform(-0.5, 0.5) * wy * cfg.camera_region,
                  rng.uniform(0.25, 0.5) * h])
    yaw = rng.uniform(0, 2 * np.pi)
    pitch = np.radians(rng.uniform(-cfg.max_pitch_deg, cfg.max_pitch_deg))
    roll = np.radians(rng.uniform(-cfg.max_roll_deg, cfg.max_roll_deg))
    d = np.array([np.cos(yaw) * np.cos(pitch), np.sin(yaw) * np.cos(pitch), np.sin(pitch)])
    right = np.cross(d, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(d, right)
    R = axis_angle([0, 0, 1], roll) @ np.vstack([right, down, d])
    return CameraPose(R, c)


def _visible(pose: CameraPose, K: CameraIntrinsics, points: np.ndarray, margin: float):
    uv, front = project_many(pose, K, points)
    inside = front & (uv[:, 0] >= margin) & (uv[:, 0] < K.width - margin) \
        & (uv[:, 1] >= margin) & (uv[:, 1] < K.height - margin)
    return np.nonzero(inside)[0], uv


def synth_generate(config: SynthConfig = SynthConfig(), seed: int = 0) -> SyntheticScene:
    """Sample a scene. Identical ``(config, seed)`` always gives the identical scene."""
    cfg = config
    rng = np.random.default_rng(seed)
    K = cfg.K
    L = cfg.n_landmarks
    landmarks = _surface_samples(L, cfg.room, rng)
    theta = rng.uniform(0, np.pi / 2, (L, N_ANGLES))
    sigs = signature(theta)
    distractor = np.zeros(L, dtype=bool)
    distractor[rng.permutation(L)[:int(round(cfg.distractor_fraction * L))]] = True
    keypoints3d = landmarks + rng.normal(0, cfg.keypoint_jitter, (L, 3)) if cfg.keypoint_jitter else landmarks.copy()
    sparse = landmarks + rng.normal(0, cfg.sparse_noise, (L, 3)) if cfg.sparse_noise else landmarks.copy()
    desc3d = descriptor_3d(sigs, cfg.sigma_3d, rng)
    real = np.nonzero(~distractor)[0]

    poses, features = {}, {}
    train_ids = [f"train_{i:03d}" for i in range(cfg.n_train)]
    query_ids = [f"query_{i:03d}" for i in range(cfg.n_query)]
    for img in train_ids + query_ids:
        for attempt in range(cfg.max_regenerations + 1):
            pose = _random_camera(cfg, rng)
            vis, uv = _visible(pose, K, landmarks[real], cfg.image_margin_px)
            if len(vis) >= cfg.min_visible:
                break
        else:
            raise RuntimeError(f"{img}: fewer than {cfg.min_visible} visible landmarks after "
                               f"{cfg.max_regenerations} regenerations")
        lm = real[vis]
        obs = uv[vis] + (rng.normal(0, cfg.pixel_noise, (len(vis), 2)) if cfg.pixel_noise else 0.0)
        obs[:, 0] = np.clip(obs[:, 0], 0.0, np.nextafter(K.width, 0))
        obs[:, 1] = np.clip(obs[:, 1], 0.0, np.nextafter(K.height, 0))
        desc = descriptor_2d(sigs[lm], cfg.sigma_2d, rng)
        n_clutter = int(round(cfg.clutter_fraction * len(lm)))
        if n_clutter:
            c_uv = np.column_stack([rng.uniform(0, K.width, n_clutter), rng.uniform(0, K.height, n_clutter)])
            c_desc = descriptor_2d(signature(rng.uniform(0, np.pi / 2, (n_clutter, N_ANGLES))), cfg.sigma_2d, rng)
            obs = np.vstack([obs, c_uv])
            desc = np.vstack([desc, c_desc])
            lm = np.concatenate([lm, np.full(n_clutter, -1)])
        n = len(lm)
        features[img] = ImageFeatures(obs, desc, lm.astype(np.int64), rng.uniform(1.6, 6.4, n),
                                      rng.uniform(-np.pi, np.pi, n))
        poses[img] = pose

    filler = _surface_samples(cfg.n_filler, cfg.room, rng)
    n_out = int(round(cfg.outlier_fraction * cfg.n_filler))
    wx, wy, h = cfg.room
    outliers = np.column_stack([rng.uniform(-0.3, 0.3, n_out) * wx, rng.uniform(-0.3, 0.3, n_out) * wy,
                                rng.uniform(0.3, 0.7, n_out) * h])
    pts = np.vstack([keypoints3d, filler, outliers])
    colors = rng.integers(0, 256, (len(pts), 3), dtype=np.uint8)
    dense = PointCloud(pts, colors=colors)
    return SyntheticScene(cfg, seed, landmarks, sigs, distractor, keypoints3d, desc3d, sparse, poses,
                          train_ids, query_ids, features, dense)


def scene_defaults(cfg: SynthConfig) -> dict:
    """Pipeline settings suited to a synthetic scene.

    The join threshold follows from the keypoint and sparse-point noise rather
    than the cloud spacing, since landmarks are far sparser than the filler.
    Filler is uniform, so a loose SOR cut removes the floating outliers
    without thinning the surfaces.
    """
    spread = math.sqrt(3 * (cfg.keypoint_jitter ** 2 + cfg.sparse_noise ** 2))
    alpha = max(4.0 * spread, 1e-3)
    return {"filter": {"k": 16, "stddev_mult": 3.0}, "mine": {"alpha": alpha, "beta": 10.0 * alpha}}


def _dump_json(obj, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def write_scene(scene: SyntheticScene, out_dir) -> Path:
    """Write the scene as a manifest plus its data files; returns the manifest path.

    Layout::

        scene.json          manifest (ids, intrinsics, files, ground truth)
        dense.ply           dense cloud: keypoints, surface filler, floating outliers
        tracks.json         track store of the sparse reconstruction
        keypoints3d.dsc     3D keypoints with descriptors (landmarks and distractors)
        images/<id>.dsc     2D keypoints with descriptors per image
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    write_ply(scene.dense, out / "dense.ply")
    scene.track_store().save(out / "tracks.json")
    write_descriptors(out / "keypoints3d.dsc", DescriptorFile(3, scene.keypoints3d, scene.descriptors3d))
    images = {}
    for img, f in scene.features.items():
        write_descriptors(out / "images" / f"{img}.dsc",
                          DescriptorFile(2, f.uv, f.descriptors, f.scale, f.orientation))
        images[img] = {"descriptors": f"images/{img}.dsc"}
    manifest = {
        "name": "synthetic",
        "seed": scene.seed,
        "synth": scene.config.to_dict(),
        "diameter": scene.diameter,
        "intrinsics": scene.K.to_dict(),
        "dense_cloud": "dense.ply",
        "tracks": "tracks.json",
        "keypoints3d": "keypoints3d.dsc",
        "images": images,
        "train_ids": scene.train_ids,
        "query_ids": scene.query_ids,
        "ground_truth": {img: scene.poses[img].to_dict() for img in scene.query_ids},
        "distractors": int(scene.distractor.sum()),
        "config": scene_defaults(scene.config),
    }
    _dump_json(manifest, out / "scene.json")
    logger.info("wrote synthetic scene with %d landmarks (%d distractors) to %s",
                len(scene.landmarks), int(scene.distractor.sum()), out)
    return out / "scene.json"
