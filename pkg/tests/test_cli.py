import json
import os

import numpy as np
import pytest

from kpreid.cli import main
from kpreid.featureio import load_checkpoint, load_manifest
from kpreid.model import ModelParams, load_config

TINY = {"epochs": 2, "vit": {"dim": 16, "depth": 1, "heads": 2, "mlp_ratio": 2}}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data(tmp_path, capsys):
    d = tmp_path / "data"
    code, _, _ = run(capsys, "synth", "--seed", 3, "--identities", 5, "--images-per-id", 4, "--out-dir", d)
    assert code == 0
    return d


@pytest.fixture
def propagated(data, capsys):
    code, out, _ = run(capsys, "propagate", "--manifest", data / "manifest.json",
                       "--ref-keypoints", data / "ref_keypoints.json", "--out-dir", data / "propagated",
                       "--ground-truth", data / "ground_truth.json", "--heatmaps")
    assert code == 0
    return data, json.loads(out)


def snapshot(root):
    return {os.path.relpath(os.path.join(d, f), root): open(os.path.join(d, f), "rb").read()
            for d, _, files in os.walk(root) for f in files}


def test_synth_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "synth", "--seed", 7, "--identities", 3, "--images-per-id", 3,
                   "--out-dir", tmp_path / name)[0] == 0
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    assert a and a == b


def test_synth_rejects_zero_keypoints(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--keypoints", 0, "--out-dir", tmp_path)
    assert code == 1
    assert "keypoints must be >= 1" in err


def test_propagate_scores_ground_truth_and_writes_heatmaps(propagated):
    data, summary = propagated
    n_images = len(load_manifest(data / "manifest.json").images)
    assert summary["recovery_rate"] == 1.0
    assert summary["images"] == n_images - 1
    assert summary["heatmaps"] == 3 * (n_images - 1)
    assert len(list((data / "propagated" / "heatmaps").glob("*.pgm"))) == 3 * (n_images - 1)


def test_train_zero_epochs_writes_init(propagated, tmp_path, capsys):
    data, _ = propagated
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    code, stdout, _ = run(capsys, "train", "--config", cfg, "--data-dir", data, "--out-dir", out, "--epochs", 0)
    assert code == 0 and json.loads(stdout)["step"] == 0
    vit = load_config(out / "vit.json")
    arrays, _ = load_checkpoint(out / "checkpoint.ckpt")
    for name, arr in ModelParams.init(vit, seed=0).arrays().items():
        assert arrays[name].tobytes() == arr.tobytes()


def test_train_then_eval(propagated, tmp_path, capsys):
    data, _ = propagated
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "run"
    assert run(capsys, "train", "--config", cfg, "--data-dir", data, "--out-dir", out)[0] == 0
    code, stdout, _ = run(capsys, "eval", "--checkpoint", out / "checkpoint.ckpt", "--data-dir", data)
    assert code == 0
    report = json.loads(stdout)
    assert 0.0 <= report["accuracy"] <= 1.0
    assert report["counts"]["TN"] == report["counts"]["FP"] == 0


def test_eval_with_wrong_width_exits_1(propagated, tmp_path, capsys):
    data, _ = propagated
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({**TINY, "epochs": 0}))
    out = tmp_path / "run"
    run(capsys, "train", "--config", cfg, "--data-dir", data, "--out-dir", out)
    vit = json.loads((out / "vit.json").read_text())
    other = tmp_path / "other_vit.json"
    other.write_text(json.dumps({**vit, "dim": 8}))
    code, _, err = run(capsys, "eval", "--checkpoint", out / "checkpoint.ckpt", "--data-dir", data, "--config", other)
    assert code == 1 and "error" in err


def test_train_without_propagation_exits_1(data, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data-dir", data, "--out-dir", tmp_path / "run", "--epochs", 0)
    assert code == 1 and "propagate" in err


def test_unknown_protocol_exits_1(tmp_path, capsys):
    code, _, err = run(capsys, "ablate", "--protocol", "bogus", "--out-dir", tmp_path)
    assert code == 1 and "unknown protocol" in err


def test_missing_feature_exits_2(data, tmp_path, capsys):
    victim = sorted((data / "features").glob("*.fmap"))[-1]
    victim.unlink()
    code, _, err = run(capsys, "propagate", "--manifest", data / "manifest.json",
                       "--ref-keypoints", data / "ref_keypoints.json", "--out-dir", tmp_path / "p")
    assert code == 2 and victim.stem in err


def test_unknown_image_exits_1(data, tmp_path, capsys):
    code, _, err = run(capsys, "heatmap", "--manifest", data / "manifest.json",
                       "--ref-keypoints", data / "ref_keypoints.json", "--image-id", "nope", "--out-dir", tmp_path)
    assert code == 1 and "nope" in err


def test_heatmap_command(data, tmp_path, capsys):
    target = load_manifest(data / "manifest.json").images[-1].image_id
    code, out, _ = run(capsys, "heatmap", "--manifest", data / "manifest.json",
                       "--ref-keypoints", data / "ref_keypoints.json", "--image-id", target, "--out-dir", tmp_path)
    paths = json.loads(out)["heatmaps"]
    assert code == 0 and len(paths) == 3
    raw = open(paths[0], "rb").read()
    assert raw.startswith(b"P5\n")


def test_usage_error_exits_1(capsys):
    code, _, err = run(capsys, "train")
    assert code == 1 and "required" in err


def test_ablate_writes_table(tmp_path, capsys, monkeypatch):
    import kpreid.ablation as ab

    calls = []

    def fake_score(ds, kps, cfg):
        calls.append(cfg.mode)
        return {"none": 0.5, "kpe": 0.75, "ckpe": 1.0}[cfg.mode]

    monkeypatch.setattr(ab, "_score", fake_score)
    monkeypatch.setattr(ab, "DISCRIMINATIVE_DATA", {"n_identities": 5, "images_per_identity": 4})
    code, out, err = run(capsys, "ablate", "--protocol", "mode-compare", "--seeds", 2, "--out-dir", tmp_path)
    assert code == 0
    res = json.loads(out)
    assert res["median"] == {"none": 0.5, "kpe": 0.75, "ckpe": 1.0}
    assert res["mean"]["kpe"] == 0.75
    assert calls == ["none", "kpe", "ckpe"] * 2
    assert (tmp_path / "ablation_mode-compare.txt").read_text().startswith("protocol: mode-compare")
    assert np.isclose(res["accuracy"]["ckpe"], [1.0, 1.0]).all()
