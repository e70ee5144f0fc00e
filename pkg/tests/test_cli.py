import json

import pytest

from cloudloc.cli import main

SYNTH = {"synth": {"n_landmarks": 800, "n_train": 8, "n_query": 2, "n_filler": 3000, "min_visible": 30}}


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "synth.json"
    cfg.write_text(json.dumps(SYNTH))
    assert main(["synth", "--seed", "2", "--out", str(d / "scene"), "--config", str(cfg)]) == 0
    return d


def test_individual_commands_chain(scene, capsys):
    s, w = scene / "scene", scene / "work"
    manifest = json.loads((s / "scene.json").read_text())
    assert main(["filter", "--in", str(s / "dense.ply"), "--out", str(w / "f.ply"), "--stddev-mult", "3"]) == 0
    assert main(["extract3d", "--cloud", str(w / "f.ply"), "--out", str(w / "k3.dsc"),
                 "--keypoints", str(s / "keypoints3d.dsc")]) == 0
    alpha = manifest["config"]["mine"]["alpha"]
    assert main(["mine", "--cloud", str(w / "f.ply"), "--tracks", str(s / "tracks.json"),
                 "--keypoints3d", str(w / "k3.dsc"), "--images-desc-dir", str(s / "images"),
                 "--query-ids", *manifest["query_ids"], "--alpha", str(alpha), "--out", str(w / "t.trs")]) == 0
    assert main(["train", "--data", str(w / "t.trs"), "--grid", '[{"n_trees": 6}]', "--out", str(w / "m.json")]) == 0
    q = manifest["query_ids"][0]
    assert main(["match", "--model", str(w / "m.json"), "--desc2d", str(s / "images" / f"{q}.dsc"),
                 "--desc3d", str(w / "k3.dsc"), "--out", str(w / "matches.json")]) == 0
    assert len(json.loads((w / "matches.json").read_text())) > 0
    (w / "K.json").write_text(json.dumps(manifest["intrinsics"]))
    for qid in manifest["query_ids"]:
        assert main(["localize", "--model", str(w / "m.json"), "--cloud-desc", str(w / "k3.dsc"),
                     "--image-desc", str(s / "images" / f"{qid}.dsc"), "--intrinsics", str(w / "K.json"),
                     "--out", str(w / "results" / f"{qid}.json")]) == 0
    assert main(["evaluate", "--results-dir", str(w / "results"), "--ground-truth", str(s / "scene.json"),
                 "--out-dir", str(w / "eval")]) == 0
    out = capsys.readouterr().out
    assert "Position m" in out and "localized" in out
    assert (w / "eval" / "table.csv").exists()


def test_pipeline_command(scene, capsys):
    cfg = scene / "fast.json"
    cfg.write_text(json.dumps({"train": {"grid": [{"n_trees": 6}]}}))
    assert main(["pipeline", "--scene", str(scene / "scene" / "scene.json"), "--out", str(scene / "run"),
                 "--config", str(cfg)]) == 0
    assert "Angle degrees" in capsys.readouterr().out


def test_missing_input_is_invalid(tmp_path, capsys):
    assert main(["filter", "--in", str(tmp_path / "nope.ply"), "--out", str(tmp_path / "o.ply")]) == 2
    assert "error" in capsys.readouterr().err


def test_malformed_json_is_invalid(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--out", str(tmp_path / "s"), "--config", str(bad)]) == 2


def test_bad_file_format_is_invalid(tmp_path):
    p = tmp_path / "x.dsc"
    p.write_bytes(b"garbage")
    assert main(["train", "--data", str(p), "--out", str(tmp_path / "m.json")]) == 2


def test_stage_failure_exit_code(scene, tmp_path):
    m = json.loads((scene / "scene" / "scene.json").read_text())
    m["dense_cloud"] = "missing.ply"
    bad = scene / "scene" / "broken.json"
    bad.write_text(json.dumps(m))
    assert main(["pipeline", "--scene", str(bad), "--out", str(tmp_path / "o")]) == 3


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as exc:
        main(["filter"])
    assert exc.value.code == 2
