import json
import logging

import pytest

from cloudloc.pipeline import StageError, merge_config, run_pipeline
from cloudloc.synth import SynthConfig, synth_generate, write_scene

SMALL = SynthConfig(n_landmarks=800, n_train=8, n_query=3, n_filler=3000, min_visible=30)
FAST = {"train": {"grid": [{"n_trees": 8, "max_depth": 16}]}}


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    return write_scene(synth_generate(SMALL, seed=1), tmp_path_factory.mktemp("scene"))


@pytest.fixture(scope="module")
def first_run(scene, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, run_pipeline(scene, out, FAST)


def test_small_scene_end_to_end(first_run):
    out, report = first_run
    for name in ("filtered.ply", "keypoints3d.dsc", "training.trs", "model.json", "report.json",
                 "table.txt", "table.csv", "timings.json", "results/query_000.json"):
        assert (out / name).exists(), name
    counts = report["summary"]["counts"]
    assert counts["total"] == 3
    assert counts["localized"] >= 2
    assert report["median_position_relative"] < 0.05
    assert json.loads((out / "stages" / "filter.json").read_text())["info"]["removed"] >= 30


def test_resume_skips_completed_stages(scene, first_run, caplog):
    out, report = first_run
    before = (out / "report.json").read_bytes()
    with caplog.at_level(logging.INFO, logger="cloudloc.pipeline"):
        again = run_pipeline(scene, out, FAST)
    skipped = [r.getMessage() for r in caplog.records if "up to date" in r.getMessage()]
    assert len(skipped) == 7
    assert again == report
    assert (out / "report.json").read_bytes() == before


def test_config_change_reruns_downstream_only(scene, first_run, caplog):
    out, _ = first_run
    changed = dict(FAST, match={"tau": 0.6})
    try:
        with caplog.at_level(logging.INFO, logger="cloudloc.pipeline"):
            run_pipeline(scene, out, changed)
        ran = [r.getMessage() for r in caplog.records if r.getMessage().endswith(": running")]
        assert ran == ["stage localize: running", "stage evaluate: running"]
    finally:
        run_pipeline(scene, out, FAST)


def test_report_is_deterministic(scene, first_run, tmp_path):
    out, _ = first_run
    run_pipeline(scene, tmp_path, FAST)
    assert (tmp_path / "report.json").read_bytes() == (out / "report.json").read_bytes()


def test_stage_error_names_stage(scene, tmp_path):
    bad = json.loads(scene.read_text())
    bad["dense_cloud"] = "missing.ply"
    manifest = scene.parent / "bad.json"
    manifest.write_text(json.dumps(bad))
    with pytest.raises(StageError) as exc:
        run_pipeline(manifest, tmp_path)
    assert exc.value.stage == "filter"


def test_stop_after_and_unknown_stage(scene, tmp_path):
    assert run_pipeline(scene, tmp_path, FAST, stop_after="extract2d") is None
    assert (tmp_path / "stages" / "extract2d.json").exists()
    assert not (tmp_path / "stages" / "mine.json").exists()
    with pytest.raises(ValueError):
        run_pipeline(scene, tmp_path, FAST, stop_after="bogus")


def test_merge_config_ignores_none():
    merged = merge_config({"a": {"x": 1, "y": 2}}, {"a": {"x": None, "y": 3}})
    assert merged["a"] == {"x": 1, "y": 3}
    assert merged["filter"]["k"] == 16
    with pytest.raises(ValueError):
        merge_config({"a": 1})
