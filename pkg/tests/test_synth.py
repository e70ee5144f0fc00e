import json

import numpy as np
import pytest

from cloudloc.geometry import project_many
from cloudloc.synth import SynthConfig, descriptor_2d, descriptor_3d, signature, synth_generate, write_scene

SMALL = SynthConfig(n_landmarks=600, n_train=5, n_query=2, n_filler=2000, min_visible=20)


def test_signature_structure():
    theta = np.random.default_rng(0).uniform(0, np.pi / 2, (5, 16))
    sig = signature(theta)
    assert sig.shape == (5, 160)
    rng = np.random.default_rng(1)
    d2 = descriptor_2d(sig, 0.0, rng)
    d3 = descriptor_3d(sig, 0.0, rng)
    assert np.allclose(np.linalg.norm(d2, axis=1), 1, atol=1e-6)
    assert np.allclose(d3.reshape(5, 4, 8).sum(axis=2), 1, atol=1e-6)
    assert np.all(d3 >= 0)


def test_zero_noise_descriptors_are_deterministic():
    sig = signature(np.full((3, 16), 0.3))
    a = descriptor_2d(sig, 0.0, np.random.default_rng(0))
    b = descriptor_2d(sig, 0.0, np.random.default_rng(99))
    assert a.tobytes() == b.tobytes()
    assert descriptor_3d(sig, 0.0, np.random.default_rng(0)).tobytes() == \
        descriptor_3d(sig, 0.0, np.random.default_rng(5)).tobytes()


def test_observations_inside_frustum():
    scene = synth_generate(SMALL, seed=3)
    K = scene.K
    assert len(scene.train_ids) == 5 and len(scene.query_ids) == 2
    for img, f in scene.features.items():
        assert len(f.uv) >= SMALL.min_visible
        uv, front = project_many(scene.poses[img], K, scene.landmarks[f.landmark])
        assert front.all()
        assert np.all((uv >= SMALL.image_margin_px) & (uv < [K.width - SMALL.image_margin_px,
                                                              K.height - SMALL.image_margin_px]))
        assert not scene.distractor[f.landmark].any()


def test_distractors_and_dense_cloud():
    scene = synth_generate(SMALL, seed=4)
    assert scene.distractor.sum() == round(0.3 * 600)
    assert len(scene.dense) == 600 + 2000 + 20
    assert np.array_equal(scene.dense.points[:600], scene.keypoints3d)


def test_same_seed_same_files(tmp_path):
    a = write_scene(synth_generate(SMALL, seed=5), tmp_path / "a")
    b = write_scene(synth_generate(SMALL, seed=5), tmp_path / "b")
    for name in ["scene.json", "dense.ply", "tracks.json", "keypoints3d.dsc", "images/query_000.dsc"]:
        assert (a.parent / name).read_bytes() == (b.parent / name).read_bytes()
    manifest = json.loads(a.read_text())
    assert set(manifest["ground_truth"]) == {"query_000", "query_001"}
    assert manifest["config"]["mine"]["beta"] == pytest.approx(10 * manifest["config"]["mine"]["alpha"])


def test_different_seed_differs():
    a = synth_generate(SMALL, seed=1)
    b = synth_generate(SMALL, seed=2)
    assert not np.array_equal(a.landmarks, b.landmarks)


def test_impossible_visibility_raises():
    cfg = SynthConfig(n_landmarks=50, n_train=1, n_query=0, n_filler=10, min_visible=1000, max_regenerations=3)
    with pytest.raises(RuntimeError, match="regenerations"):
        synth_generate(cfg, seed=0)


def test_config_round_trip_and_validation():
    assert SynthConfig.from_dict(SMALL.to_dict()) == SMALL
    with pytest.raises(ValueError):
        SynthConfig(distractor_fraction=1.0)
