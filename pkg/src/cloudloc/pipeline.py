"""Stage functions and the resumable end-to-end run.

A scene is described by a JSON manifest (``scene.json``) with paths relative
to the manifest's directory::

    {"intrinsics": {...},                     # shared by all images unless overridden
     "dense_cloud": "dense.ply",
     "tracks": "tracks.json",
     "keypoints3d": "keypoints3d.dsc",        # optional; otherwise Harris + RIFT on the cloud
     "images": {"<id>": {"image": "img.pgm"} | {"descriptors": "img.dsc"}, ...},
     "train_ids": [...], "query_ids": [...],
     "ground_truth": {"<query id>": {"rotation": [...], "center": [...]}},
     "diameter": 28.9,                         # optional, scene size for relative errors
     "config": {...}}                          # optional per-stage defaults

Stages: filter, extract3d, extract2d, mine, train, localize, evaluate. Each
stage writes its artifacts under the output directory and a marker holding a
hash of its configuration and inputs; a rerun skips stages whose marker
matches.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from pathlib import Path
from typing import Optional

import numpy as np

from .evaluation import evaluate, format_csv, format_table, report_dict
from .features2d import load_image, sift
from .features3d import Keypoints3D, default_radii, detect_harris3d, extract_rift
from .formats import DescriptorFile, read_descriptors, read_training_set, write_descriptors, write_training_set
from .forest import RandomForest
from .geometry import CameraIntrinsics, CameraPose
from .matcher import train_matcher
from .mining import (MiningConfig, TrackStore, build_training_set, build_zeta, expand_one_to_one,
                     generate_negatives, strip_query_points)
from .ply import read_ply, write_ply
from .pointcloud import PointCloud, estimate_normals, intensity_and_gradient, sor_filter
from .pose import LocalizationResult, MatchConfig, MlesacConfig, localize
from .spatial import SpatialIndex

logger = logging.getLogger(__name__)

STAGES = ("filter", "extract3d", "extract2d", "mine", "train", "localize", "evaluate")

DEFAULT_CONFIG = {
    "filter": {"k": 16, "stddev_mult": 1.0},
    "extract3d": {"normal_k": 16, "detector_radius_mult": 6.0, "descriptor_radius_mult": 12.0,
                  "threshold": 1e-4, "distance_bins": 4, "gradient_bins": 8},
    "extract2d": {"scales_per_octave": 3, "contrast_thresh": 0.04, "edge_thresh": 10.0},
    "mine": {"alpha": None, "beta": None, "negative_ratio": 1.0, "pixel_tol": 2.0, "seed": 0},
    "train": {"grid": [{"n_trees": 10, "max_depth": 20}, {"n_trees": 25, "max_depth": 20}],
              "fraction": 0.15, "min_leaf": 5, "seed": 0},
    "match": {"tau": 0.5, "top_k": 3, "max_candidates": None},
    "mlesac": {},
}


class StageError(RuntimeError):
    def __init__(self, stage: str, error: BaseException):
        super().__init__(f"stage '{stage}' failed: {error}")
        self.stage = stage
        self.error = error


def merge_config(*layers: Optional[dict]) -> dict:
    """Deep-merge config dicts; later layers win, ``None`` values in a layer are ignored."""
    out = copy.deepcopy(DEFAULT_CONFIG)
    for layer in layers:
        for section, values in (layer or {}).items():
            if not isinstance(values, dict):
                raise ValueError(f"config section '{section}' must be an object")
            dst = out.setdefault(section, {})
            for k, v in values.items():
                if v is not None or k not in dst:
                    dst[k] = v
    return out


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def dump_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


# -- individual stages ------------------------------------------------------

def stage_filter(cloud_path, out_path, k: int = 16, stddev_mult: float = 1.0) -> np.ndarray:
    cloud = read_ply(cloud_path)
    filtered, removed = sor_filter(cloud, k, stddev_mult)
    write_ply(filtered, out_path)
    dump_json({"removed": removed.tolist(), "k": k, "stddev_mult": stddev_mult,
               "input_points": len(cloud)}, f"{out_path}.removed.json")
    return removed


def stage_extract3d(cloud_path, out_path, keypoints_path=None, normal_k: int = 16,
                    detector_radius_mult: float = 6.0, descriptor_radius_mult: float = 12.0,
                    threshold: float = 1e-4, distance_bins: int = 4, gradient_bins: int = 8) -> int:
    """3D keypoints with descriptors for the (filtered) cloud.

    With ``keypoints_path`` the given keypoints are kept where their position
    is still a point of the cloud; otherwise Harris keypoints are detected and
    described with RIFT.
    """
    cloud = read_ply(cloud_path)
    index = cloud.index()
    if keypoints_path is not None:
        given = read_descriptors(keypoints_path)
        if given.kind != 3:
            raise ValueError(f"{keypoints_path} does not hold 3D keypoints")
        d, _ = index.knn(given.coords, 1) if len(given) else (np.empty((0, 1)), None)
        keep = d[:, 0] == 0
        logger.info("extract3d: %d of %d given keypoints survive filtering", int(keep.sum()), len(given))
        write_descriptors(out_path, DescriptorFile(3, given.coords[keep], given.values[keep]))
        return int(keep.sum())
    if cloud.normals is None:
        cloud = estimate_normals(cloud, normal_k, index=index)
    cloud = intensity_and_gradient(cloud, normal_k, index=index)
    r_det, r_desc = default_radii(index, detector_radius_mult, descriptor_radius_mult)
    kps = detect_harris3d(cloud, index, r_det, threshold)
    desc = extract_rift(cloud, kps, r_desc, distance_bins, gradient_bins, index=index)
    ok = desc.valid
    write_descriptors(out_path, DescriptorFile(3, kps.positions[ok], desc.values[ok]))
    return int(ok.sum())


def stage_extract2d(image_path, out_path, scales_per_octave: int = 3, contrast_thresh: float = 0.04,
                    edge_thresh: float = 10.0) -> int:
    img = load_image(image_path)
    kp, desc = sift(img, scales_per_octave=scales_per_octave, contrast_thresh=contrast_thresh,
                    edge_thresh=edge_thresh)
    write_descriptors(out_path, DescriptorFile(2, kp.uv, desc, kp.scale, kp.orientation))
    return len(kp)


def stage_mine(cloud_path, tracks_path, keypoints3d_path, desc2d: dict, query_ids, out_path,
               config: MiningConfig) -> dict:
    """Mine the training set; ``desc2d`` maps image id to a DSC1 path."""
    tracks = strip_query_points(TrackStore.load(tracks_path), query_ids)
    keys = read_descriptors(keypoints3d_path)
    dense_index = None if config.alpha is not None else SpatialIndex(read_ply(cloud_path).points)
    cfg = config.resolved(dense_index)
    train_ids = sorted(set(desc2d) - set(query_ids))
    files = {img: read_descriptors(desc2d[img]) for img in train_ids}
    zeta = build_zeta(keys.coords, tracks.points, cfg.alpha)
    triples = expand_one_to_one(zeta, tracks, {img: f.coords for img, f in files.items()}, cfg.pixel_tol)
    if len(triples) == 0:
        raise ValueError("no positive pairs mined; check alpha and pixel_tol")
    negatives = generate_negatives(triples, keys.coords, cfg)
    retention = float(len(np.unique(zeta[:, 0])) / max(len(keys), 1))
    ts = build_training_set(triples, negatives, {img: f.values for img, f in files.items()}, keys.values, cfg,
                            extra_meta={"zeta_pairs": int(len(zeta)), "keypoint_retention": retention,
                                        "n_keypoints3d": len(keys), "n_sparse_points": len(tracks)})
    write_training_set(out_path, ts)
    return ts.meta


def stage_train(data_path, out_path, grid=None, fraction: float = 0.15, seed: int = 0, **params) -> RandomForest:
    ts = read_training_set(data_path)
    model = train_matcher(ts, grid, fraction, seed, **params)
    model.save(out_path)
    return model


def stage_localize(model: RandomForest, keypoints3d: DescriptorFile, query: DescriptorFile,
                   K: CameraIntrinsics, match: MatchConfig, mlesac: MlesacConfig) -> LocalizationResult:
    return localize(query.coords, query.values, keypoints3d.coords, keypoints3d.values, model, K, match, mlesac)


# -- pipeline ----------------------------------------------------------------

class Scene:
    """Resolved scene manifest."""

    def __init__(self, manifest_path):
        self.path = Path(manifest_path)
        self.root = self.path.parent
        self.data = load_json(self.path)
        for key in ("dense_cloud", "tracks", "images", "query_ids"):
            if key not in self.data:
                raise ValueError(f"scene manifest lacks '{key}'")
        self.images = self.data["images"]
        self.query_ids = list(self.data["query_ids"])
        self.train_ids = list(self.data.get("train_ids", sorted(set(self.images) - set(self.query_ids))))
        missing = [i for i in self.query_ids + self.train_ids if i not in self.images]
        if missing:
            raise ValueError(f"scene manifest lists unknown images: {missing}")

    def file(self, rel) -> Path:
        return self.root / rel

    def intrinsics(self, img: str) -> CameraIntrinsics:
        d = self.images[img].get("intrinsics", self.data.get("intrinsics"))
        if d is None:
            raise ValueError(f"no intrinsics for image {img!r}")
        return CameraIntrinsics.from_dict(d)

    def ground_truth(self) -> dict:
        return {k: CameraPose.from_dict(v) for k, v in self.data.get("ground_truth", {}).items()}

    def digest(self) -> str:
        h = hashlib.sha256(self.path.read_bytes())
        for rel in [self.data["dense_cloud"], self.data["tracks"], self.data.get("keypoints3d")] + \
                [v.get("image") or v.get("descriptors") for v in self.images.values()]:
            if rel:
                f = self.file(rel)
                # a missing input is reported by the stage that reads it
                sig = f"{f.stat().st_size}:{f.stat().st_mtime_ns}" if f.exists() else "missing"
                h.update(f"{rel}:{sig}".encode())
        return h.hexdigest()


def _hash(*parts) -> str:
    return hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).hexdigest()[:16]


def run_pipeline(manifest_path, out_dir, config: Optional[dict] = None, force: bool = False,
                 stop_after: Optional[str] = None) -> dict:
    """Run every stage for the scene; returns the report dictionary.

    Completed stages whose marker hash matches are skipped. ``report.json`` is
    deterministic for fixed inputs and seeds; wall-clock timings go to
    ``timings.json``.
    """
    scene = Scene(manifest_path)
    cfg = merge_config(scene.data.get("config"), config)
    out = Path(out_dir)
    for sub in ("stages", "desc2d", "results"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    timings_path = out / "timings.json"
    timings = load_json(timings_path) if timings_path.exists() else {}
    upstream = scene.digest()
    report = None

    def run(stage, sections, fn):
        nonlocal upstream
        h = _hash(upstream, {s: cfg.get(s) for s in sections})
        marker = out / "stages" / f"{stage}.json"
        if not force and marker.exists() and load_json(marker).get("hash") == h:
            logger.info("stage %s: up to date, skipped", stage)
            upstream = h
            return False
        logger.info("stage %s: running", stage)
        t0 = time.perf_counter()
        try:
            info = fn() or {}
        except Exception as exc:  # any failure is reported with the stage name
            raise StageError(stage, exc) from exc
        timings[stage] = time.perf_counter() - t0
        dump_json({"hash": h, "info": info}, marker)
        dump_json(timings, timings_path)
        upstream = h
        return True

    filtered = out / "filtered.ply"
    keys3d = out / "keypoints3d.dsc"
    training = out / "training.trs"
    model_path = out / "model.json"

    def do_filter():
        removed = stage_filter(scene.file(scene.data["dense_cloud"]), filtered, **cfg["filter"])
        return {"removed": int(len(removed))}

    def do_extract3d():
        given = scene.data.get("keypoints3d")
        n = stage_extract3d(filtered, keys3d, scene.file(given) if given else None, **cfg["extract3d"])
        return {"keypoints": n}

    def do_extract2d():
        counts = {}
        for img in sorted(scene.images):
            entry, dst = scene.images[img], out / "desc2d" / f"{img}.dsc"
            if "descriptors" in entry:
                df = read_descriptors(scene.file(entry["descriptors"]))
                if df.kind != 2:
                    raise ValueError(f"{entry['descriptors']} does not hold 2D keypoints")
                write_descriptors(dst, df)
                counts[img] = len(df)
            else:
                counts[img] = stage_extract2d(scene.file(entry["image"]), dst, **cfg["extract2d"])
        return {"keypoints": counts}

    def do_mine():
        desc2d = {img: out / "desc2d" / f"{img}.dsc" for img in scene.train_ids}
        meta = stage_mine(filtered, scene.file(scene.data["tracks"]), keys3d, desc2d, scene.query_ids,
                          training, MiningConfig.from_dict(cfg["mine"]))
        return {k: meta[k] for k in ("n_positive", "n_negative", "zeta_pairs", "keypoint_retention")}

    def do_train():
        t = dict(cfg["train"])
        model = stage_train(training, model_path, t.pop("grid"), t.pop("fraction"), t.pop("seed"), **t)
        return {"n_trees": len(model.trees), "validation_accuracy": model.meta.get("validation_accuracy")}

    def do_localize():
        model = RandomForest.load(model_path)
        k3 = read_descriptors(keys3d)
        match = MatchConfig.from_dict(cfg["match"])
        mles = MlesacConfig.from_dict(cfg["mlesac"])
        status = {}
        for qid in scene.query_ids:
            q = read_descriptors(out / "desc2d" / f"{qid}.dsc")
            res = stage_localize(model, k3, q, scene.intrinsics(qid), match, mles)
            dump_json(res.to_dict(), out / "results" / f"{qid}.json")
            status[qid] = res.to_dict()["status"]
            logger.info("%s: %s", qid, status[qid])
        return {"status": status}

    def do_evaluate():
        nonlocal report
        results = {qid: LocalizationResult.from_dict(load_json(out / "results" / f"{qid}.json"))
                   for qid in scene.query_ids}
        summary, records = evaluate(results, scene.ground_truth())
        extra = {"scene": scene.data.get("name", scene.path.parent.name), "config": cfg}
        if "diameter" in scene.data:
            d = float(scene.data["diameter"])
            extra["diameter"] = d
            med = summary.position.median
            extra["median_position_relative"] = None if med != med else med / d
        report = report_dict(summary, records, extra)
        dump_json(report, out / "report.json")
        (out / "table.txt").write_text(format_table(summary))
        (out / "table.csv").write_text(format_csv(summary))
        return {"localized": summary.localized, "total": summary.total}

    plan = [("filter", ["filter"], do_filter), ("extract3d", ["extract3d"], do_extract3d),
            ("extract2d", ["extract2d"], do_extract2d), ("mine", ["mine"], do_mine),
            ("train", ["train"], do_train), ("localize", ["match", "mlesac"], do_localize),
            ("evaluate", [], do_evaluate)]
    if stop_after is not None and stop_after not in STAGES:
        raise ValueError(f"unknown stage {stop_after!r}")
    for stage, sections, fn in plan:
        run(stage, sections, fn)
        if stage == stop_after:
            break
    if report is None and (out / "report.json").exists():
        report = load_json(out / "report.json")
    return report
