"""Command-line entry point: ``cloudloc <command> [options]``.

Every command accepts ``--config FILE``, a JSON object with per-stage
sections (``filter``, ``extract3d``, ``extract2d``, ``mine``, ``train``,
``match``, ``mlesac``, ``synth``); explicit flags override it.

Exit codes: 0 success, 2 invalid input, 3 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import evaluate, format_csv, format_table, report_dict
from .features2d import ImageFormatError
from .formats import FormatError, read_descriptors
from .forest import RandomForest
from .geometry import CameraIntrinsics, CameraPose
from .matcher import match_descriptors
from .mining import MiningConfig
from .pipeline import (STAGES, StageError, dump_json, load_json, merge_config, run_pipeline, stage_extract2d,
                       stage_extract3d, stage_filter, stage_localize, stage_mine, stage_train)
from .ply import PlyError
from .pose import LocalizationResult, MatchConfig, MlesacConfig
from .synth import SynthConfig, synth_generate, write_scene

logger = logging.getLogger("cloudloc")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3


class InvalidInput(Exception):
    pass


def _section(args, name: str, **flags) -> dict:
    """Config section from ``--config`` with non-None flags layered on top."""
    base = load_json(args.config) if args.config else {}
    return merge_config(base, {name: flags})[name]


def _add_config(p):
    p.add_argument("--config", help="JSON config with per-stage sections")


def cmd_filter(args):
    c = _section(args, "filter", k=args.k, stddev_mult=args.stddev_mult)
    removed = stage_filter(args.input, args.out, c["k"], c["stddev_mult"])
    print(f"removed {len(removed)} points; wrote {args.out}")


def cmd_extract3d(args):
    c = _section(args, "extract3d", descriptor_radius_mult=args.radius_mult,
                 detector_radius_mult=args.detector_radius_mult, threshold=args.threshold)
    n = stage_extract3d(args.cloud, args.out, args.keypoints, **c)
    print(f"{n} 3D keypoints with descriptors; wrote {args.out}")


def cmd_extract2d(args):
    c = _section(args, "extract2d", contrast_thresh=args.contrast_thresh, edge_thresh=args.edge_thresh)
    n = stage_extract2d(args.image, args.out, **c)
    print(f"{n} 2D keypoints with descriptors; wrote {args.out}")


def cmd_mine(args):
    c = _section(args, "mine", alpha=args.alpha, beta=args.beta, negative_ratio=args.ratio, seed=args.seed,
                 pixel_tol=args.pixel_tol)
    d = Path(args.images_desc_dir)
    desc2d = {p.stem: p for p in sorted(d.glob("*.dsc"))}
    if not desc2d:
        raise InvalidInput(f"no .dsc files in {d}")
    meta = stage_mine(args.cloud, args.tracks, args.keypoints3d, desc2d, args.query_ids or [], args.out,
                      MiningConfig.from_dict(c))
    print(f"{meta['n_positive']} positives, {meta['n_negative']} negatives; wrote {args.out}")


def cmd_train(args):
    c = _section(args, "train", seed=args.seed)
    if args.grid is not None:
        c["grid"] = json.loads(Path(args.grid).read_text()) if Path(args.grid).exists() else json.loads(args.grid)
    if args.no_validation:
        c["grid"] = None
    grid, fraction, seed = c.pop("grid"), c.pop("fraction"), c.pop("seed")
    model = stage_train(args.data, args.out, grid, fraction, seed, **c)
    acc = model.meta.get("validation_accuracy")
    print(f"{len(model.trees)} trees" + (f", validation accuracy {acc:.4f}" if acc is not None else "")
          + f"; wrote {args.out}")


def cmd_match(args):
    c = _section(args, "match", tau=args.tau, top_k=args.topk, max_candidates=args.max_candidates)
    model = RandomForest.load(args.model)
    d2, d3 = read_descriptors(args.desc2d), read_descriptors(args.desc3d)
    cands = match_descriptors(model, d2.values, d3.values, c["tau"], c["top_k"],
                              max_candidates=c["max_candidates"])
    dump_json([m.to_dict() for m in cands], args.out)
    print(f"{len(cands)} candidates; wrote {args.out}")


def cmd_localize(args):
    m = _section(args, "match", tau=args.tau, top_k=args.topk)
    cfg_ml = _section(args, "mlesac", seed=args.seed)
    K = CameraIntrinsics.from_dict(load_json(args.intrinsics))
    if args.image_desc:
        query = read_descriptors(args.image_desc)
    else:
        tmp = Path(args.out).with_suffix(".query.dsc")
        stage_extract2d(args.image, tmp, **_section(args, "extract2d"))
        query = read_descriptors(tmp)
    res = stage_localize(RandomForest.load(args.model), read_descriptors(args.cloud_desc), query, K,
                         MatchConfig.from_dict(m), MlesacConfig.from_dict(cfg_ml))
    dump_json(res.to_dict(), args.out)
    print(f"{res.to_dict()['status']}; wrote {args.out}")


def cmd_evaluate(args):
    gt_raw = load_json(args.ground_truth)
    gt_raw = gt_raw.get("ground_truth", gt_raw)
    gt = {k: CameraPose.from_dict(v) for k, v in gt_raw.items()}
    results = {p.stem: LocalizationResult.from_dict(load_json(p)) for p in sorted(Path(args.results_dir).glob("*.json"))}
    if not results:
        raise InvalidInput(f"no result files in {args.results_dir}")
    summary, records = evaluate(results, gt)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(report_dict(summary, records), out / "report.json")
    (out / "table.txt").write_text(format_table(summary))
    (out / "table.csv").write_text(format_csv(summary))
    print(format_table(summary), end="")


def cmd_synth(args):
    base = load_json(args.config).get("synth", {}) if args.config else {}
    cfg = SynthConfig.from_dict(base)
    path = write_scene(synth_generate(cfg, args.seed), args.out)
    print(f"wrote {path}")


def cmd_pipeline(args):
    cfg = load_json(args.config) if args.config else None
    report = run_pipeline(args.scene, args.out, cfg, force=args.force, stop_after=args.stop_after)
    if report is not None:
        print((Path(args.out) / "table.txt").read_text(), end="")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cloudloc", description="Camera localization in dense point clouds.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="statistical outlier removal on a PLY cloud")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--stddev-mult", type=float)
    _add_config(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("extract3d", help="3D keypoints and RIFT descriptors")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius-mult", type=float, help="descriptor radius in median point spacings")
    p.add_argument("--detector-radius-mult", type=float)
    p.add_argument("--threshold", type=float)
    p.add_argument("--keypoints", help="use these 3D keypoints (DSC1) instead of detecting")
    _add_config(p)
    p.set_defaults(func=cmd_extract3d)

    p = sub.add_parser("extract2d", help="SIFT keypoints and descriptors of a PGM/PPM image")
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--contrast-thresh", type=float)
    p.add_argument("--edge-thresh", type=float)
    _add_config(p)
    p.set_defaults(func=cmd_extract2d)

    p = sub.add_parser("mine", help="build the labelled training set")
    p.add_argument("--cloud", required=True, help="dense cloud (for the default alpha)")
    p.add_argument("--tracks", required=True)
    p.add_argument("--keypoints3d", required=True)
    p.add_argument("--images-desc-dir", required=True)
    p.add_argument("--query-ids", nargs="*")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--ratio", type=float)
    p.add_argument("--pixel-tol", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_mine)

    p = sub.add_parser("train", help="train the descriptor matcher")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", help="JSON list of hyperparameter dicts, inline or a file")
    p.add_argument("--no-validation", action="store_true", help="train once with the train section settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="score 2D against 3D descriptors")
    p.add_argument("--model", required=True)
    p.add_argument("--desc2d", required=True)
    p.add_argument("--desc3d", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--max-candidates", type=int)
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("localize", help="estimate the pose of one query image")
    p.add_argument("--model", required=True)
    p.add_argument("--cloud-desc", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--image")
    g.add_argument("--image-desc")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--topk", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("evaluate", help="error tables from localization results")
    p.add_argument("--results-dir", required=True)
    p.add_argument("--ground-truth", required=True, help="JSON of query poses or a scene manifest")
    p.add_argument("--out-dir", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write a synthetic scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_config(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help="run every stage for a scene manifest")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="rerun stages even when up to date")
    p.add_argument("--stop-after", choices=STAGES)
    _add_config(p)
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (InvalidInput, FileNotFoundError, PlyError, FormatError, ImageFormatError,
            json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - surface any other failure as a stage failure
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
