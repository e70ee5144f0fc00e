"""Mining matched 2D/3D descriptor pairs from SfM tracks and a dense cloud.

Track store JSON layout::

    {"images": {"<image_id>": {"pose": {"rotation": [9], "center": [3]},
                               "intrinsics": {"fx", "fy", "cx", "cy", "width", "height"}}},
     "points": [{"xyz": [x, y, z], "obs": [["<image_id>", u, v], ...]}, ...]}
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from .formats import TrainingSet
from .geometry import CameraIntrinsics, CameraPose
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)


@dataclass
class TrackStore:
    points: np.ndarray                       # (N, 3) sparse cloud
    observations: list                       # per point: list of (image_id, u, v)
    poses: dict                              # image_id -> CameraPose
    intrinsics: dict                         # image_id -> CameraIntrinsics

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.observations) != len(self.points):
            raise ValueError("one observation list per sparse point required")
        for obs in self.observations:
            for img, u, v in obs:
                if img not in self.poses:
                    raise ValueError(f"observation references unknown image {img!r}")
                K = self.intrinsics[img]
                if not (0 <= u < K.width and 0 <= v < K.height):
                    raise ValueError(f"observation ({u}, {v}) outside image {img!r}")

    def __len__(self) -> int:
        return len(self.points)

    def track_lengths(self) -> np.ndarray:
        return np.array([len(o) for o in self.observations], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "images": {k: {"pose": self.poses[k].to_dict(), "intrinsics": self.intrinsics[k].to_dict()}
                       for k in sorted(self.poses)},
            "points": [{"xyz": [float(c) for c in p], "obs": [[img, float(u), float(v)] for img, u, v in obs]}
                       for p, obs in zip(self.points, self.observations)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrackStore":
        poses = {k: CameraPose.from_dict(v["pose"]) for k, v in d["images"].items()}
        intr = {k: CameraIntrinsics.from_dict(v["intrinsics"]) for k, v in d["images"].items()}
        pts = np.array([p["xyz"] for p in d["points"]], dtype=float).reshape(-1, 3)
        obs = [[(str(o[0]), float(o[1]), float(o[2])) for o in p["obs"]] for p in d["points"]]
        return cls(pts, obs, poses, intr)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "TrackStore":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class MiningConfig:
    alpha: Optional[float] = None      # None -> 2 x median spacing of the dense cloud
    beta: Optional[float] = None       # None -> 10 x alpha
    negative_ratio: float = 1.0
    pixel_tol: float = 2.0
    seed: int = 0
    max_attempts_factor: int = 50

    def resolved(self, dense_index: Optional[SpatialIndex] = None) -> "MiningConfig":
        alpha = self.alpha
        if alpha is None:
            if dense_index is None:
                raise ValueError("alpha unset and no dense cloud to derive it from")
            alpha = 2.0 * dense_index.median_spacing()
        beta = self.beta if self.beta is not None else 10.0 * alpha
        cfg = MiningConfig(alpha, beta, self.negative_ratio, self.pixel_tol, self.seed, self.max_attempts_factor)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not (self.alpha and self.alpha > 0):
            raise ValueError("alpha must be positive")
        if not self.beta > self.alpha:
            raise ValueError("beta must exceed alpha")
        if not self.negative_ratio > 0:
            raise ValueError("negative_ratio must be positive")
        if not self.pixel_tol >= 0:
            raise ValueError("pixel_tol must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "MiningConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def strip_query_points(tracks: TrackStore, query_image_ids) -> TrackStore:
    """Drop points observed only by query images and query observations elsewhere."""
    q = set(query_image_ids)
    unknown = q - set(tracks.poses)
    if unknown:
        raise ValueError(f"unknown query image ids: {sorted(unknown)}")
    if not q:
        return tracks
    keep_pts, keep_obs = [], []
    for p, obs in zip(tracks.points, tracks.observations):
        train_obs = [o for o in obs if o[0] not in q]
        if not train_obs and obs:
            continue
        keep_pts.append(p)
        keep_obs.append(train_obs)
    return TrackStore(np.asarray(keep_pts).reshape(-1, 3), keep_obs, tracks.poses, tracks.intrinsics)


def build_zeta(keys3d, sparse_points, alpha: float, index: Optional[SpatialIndex] = None) -> np.ndarray:
    """All index pairs ``(i, j)`` with ``|keys3d[i] - sparse_points[j]| < alpha``, sorted."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    K = np.asarray(keys3d, dtype=float).reshape(-1, 3)
    S = np.asarray(sparse_points, dtype=float).reshape(-1, 3)
    if len(K) == 0 or len(S) == 0:
        return np.empty((0, 2), dtype=np.int64)
    index = index or SpatialIndex(S)
    pairs = [np.column_stack([np.full(len(js), i), js])
             for i, js in enumerate(index.radius_many(K, alpha)) if len(js)]
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(pairs).astype(np.int64)


@dataclass
class Triples:
    """One row per mined (3D keypoint, image, 2D keypoint) association."""

    key3d: np.ndarray       # index into keys3d
    sparse: np.ndarray      # index into the sparse cloud
    image: list             # image ids
    kp2d: np.ndarray        # index into that image's 2D keypoints

    def __len__(self) -> int:
        return len(self.key3d)


def expand_one_to_one(zeta: np.ndarray, tracks: TrackStore, keypoints2d: Mapping[str, np.ndarray],
                      pixel_tol: float = 2.0) -> Triples:
    """Duplicate each joined 3D keypoint once per 2D keypoint that observes its sparse point.

    An observation is tied to the nearest detected keypoint of its image
    within ``pixel_tol`` (ties to the lower keypoint index); observations with
    no keypoint in range are skipped.
    """
    indexes = {img: SpatialIndex(np.asarray(uv, dtype=float).reshape(-1, 2))
               for img, uv in keypoints2d.items() if len(uv)}
    k3, sp, ims, k2 = [], [], [], []
    skipped = 0
    cache: dict = {}
    for i, j in np.asarray(zeta).reshape(-1, 2):
        for img, u, v in tracks.observations[j]:
            key = (img, u, v)
            if key not in cache:
                hit = -1
                idx = indexes.get(img)
                if idx is not None:
                    d, nn = idx.knn([[u, v]], 1)
                    if d[0, 0] <= pixel_tol:
                        hit = int(nn[0, 0])
                cache[key] = hit
            hit = cache[key]
            if hit < 0:
                skipped += 1
                continue
            k3.append(i)
            sp.append(j)
            ims.append(img)
            k2.append(hit)
    if skipped:
        logger.info("%d track observations had no 2D keypoint within %.2f px", skipped, pixel_tol)
    return Triples(np.asarray(k3, dtype=np.int64), np.asarray(sp, dtype=np.int64), ims,
                   np.asarray(k2, dtype=np.int64))


@dataclass
class Negatives:
    image: list
    kp2d: np.ndarray
    key3d: np.ndarray
    partner3d: np.ndarray   # the 2D keypoint's mined 3D keypoint
    shortfall: int = 0


def generate_negatives(triples: Triples, keys3d, config: MiningConfig,
                       rng: Optional[np.random.Generator] = None) -> Negatives:
    """Random (2D keypoint, 3D keypoint) pairs whose 3D positions are more than beta apart.

    The 2D side is drawn from the mined triples, so every 2D keypoint has a
    3D partner to measure the distance from.
    """
    K = np.asarray(keys3d, dtype=float).reshape(-1, 3)
    rng = rng or np.random.default_rng(config.seed)
    target = int(round(config.negative_ratio * len(triples)))
    if target == 0 or len(K) == 0:
        return Negatives([], np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64), target)
    attempts = config.max_attempts_factor * target
    img, k2, k3, part = [], [], [], []
    done = 0
    batch = max(64, target)
    while len(k3) < target and done < attempts:
        m = min(batch, attempts - done)
        t = rng.integers(0, len(triples), m)
        c = rng.integers(0, len(K), m)
        done += m
        ok = np.linalg.norm(K[triples.key3d[t]] - K[c], axis=1) > config.beta
        for ti, ci in zip(t[ok], c[ok]):
            if len(k3) == target:
                break
            img.append(triples.image[ti])
            k2.append(triples.kp2d[ti])
            k3.append(ci)
            part.append(triples.key3d[ti])
    shortfall = target - len(k3)
    if shortfall:
        logger.warning("only %d of %d beta-separated negatives found in %d attempts",
                       len(k3), target, attempts)
    return Negatives(img, np.asarray(k2, dtype=np.int64), np.asarray(k3, dtype=np.int64),
                     np.asarray(part, dtype=np.int64), shortfall)


def build_training_set(triples: Triples, negatives: Negatives, desc2d: Mapping[str, np.ndarray],
                       desc3d: np.ndarray, config: MiningConfig, extra_meta: Optional[dict] = None) -> TrainingSet:
    """Positives from triples, negatives appended, shuffled under the config seed.

    Features are the 2D descriptor followed by the 3D descriptor.
    """
    desc3d = np.asarray(desc3d, dtype=np.float32)
    dims2 = {np.asarray(v).shape[1] for v in desc2d.values() if len(v)}
    if len(dims2) > 1:
        raise ValueError(f"2D descriptor dimension mismatch: {sorted(dims2)}")
    d2 = next(iter(dims2), 0)
    image_ids = sorted(desc2d)
    img_index = {k: i for i, k in enumerate(image_ids)}

    def rows(images, kp2, kp3):
        if len(kp3) == 0:
            return np.empty((0, d2 + desc3d.shape[1]), np.float32)
        a = np.stack([np.asarray(desc2d[im], dtype=np.float32)[k] for im, k in zip(images, kp2)])
        return np.hstack([a, desc3d[kp3]])

    Xp = rows(triples.image, triples.kp2d, triples.key3d)
    Xn = rows(negatives.image, negatives.kp2d, negatives.key3d)
    if Xp.shape[1] != Xn.shape[1] and len(Xn):
        raise ValueError("feature dimension mismatch between positives and negatives")
    X = np.vstack([Xp, Xn]) if len(Xn) else Xp
    y = np.concatenate([np.ones(len(Xp), np.uint8), np.zeros(len(Xn), np.uint8)])
    prov = np.vstack([
        np.column_stack([[img_index[i] for i in triples.image], triples.kp2d, triples.key3d]).reshape(-1, 3),
        np.column_stack([[img_index[i] for i in negatives.image], negatives.kp2d, negatives.key3d]).reshape(-1, 3),
    ]).astype(np.int64)
    perm = np.random.default_rng(config.seed).permutation(len(y))
    meta = {"mining": asdict(config), "n_positive": int(len(Xp)), "n_negative": int(len(Xn)),
            "negative_shortfall": int(negatives.shortfall), "image_ids": image_ids,
            "feature_dim": int(X.shape[1])}
    if extra_meta:
        meta.update(extra_meta)
    return TrainingSet(np.ascontiguousarray(X[perm]), y[perm], prov[perm], meta)
