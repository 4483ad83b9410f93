import json

import numpy as np
import pytest
from scipy.io import wavfile

from drivergaze.cli import main

SMALL = {"world": {"n_sessions": 4, "samples_per_session": 10, "sessions_per_subject": 2},
         "train": {"epochs": 1, "batch_size": 8, "learning_rate": 1e-3,
                   "model": {"input_side": 16, "backbone_width": 4, "backbone_depth": 2,
                             "blocks_per_stage": 1, "head_hidden": 16, "output_size": [64, 64],
                             "imagenet_stem": False}},
         "eval": {"auc_negatives": 20, "n_boot": 20}}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["eval", "--manifest", "m.json"]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1


def test_generate_requires_seed(cfg_file, tmp_path):
    assert main(["generate", "--config", str(cfg_file), "--out", str(tmp_path / "d")]) == 2


def test_unknown_config_key_is_validation_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"rng_seed": 1, "wrold": {}}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "d")]) == 2
    p.write_text(json.dumps({"rng_seed": 1, "world": {"sides": 3}}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "d")]) == 2


def test_missing_manifest_is_validation_error(tmp_path):
    assert main(["baseline", "--manifest", str(tmp_path / "none.json"),
                 "--out", str(tmp_path / "o")]) == 2


def test_pipeline_and_run_manifest(cfg_file, tmp_path):
    d, t, e, s, b = (tmp_path / k for k in "dtesb")
    assert main(["generate", "--config", str(cfg_file), "--seed", "4", "--out", str(d)]) == 0
    run = json.loads((d / "run.json").read_text())
    assert run["rng_seed"] == 4 and "manifest.json" in run["artifacts"]
    assert len(run["config_hash"]) == 64
    m = str(d / "manifest.json")
    assert main(["train", "--config", str(cfg_file), "--seed", "4", "--manifest", m,
                 "--out", str(t)]) == 0
    assert (t / "best.pt").exists() and (t / "training_curves.png").exists()
    assert main(["eval", "--config", str(cfg_file), "--manifest", m,
                 "--checkpoint", str(t / "best.pt"), "--out", str(e)]) == 0
    report = json.loads((e / "report.json").read_text())
    assert [r["method"] for r in report["methods"]][0] == "DPEN"
    assert "embedding" in report
    assert main(["stats", "--manifest", m, "--report", str(s)]) == 0
    stats = json.loads((s / "stats.json").read_text())
    assert sum(stats["pixel_share"]) == pytest.approx(1)
    assert (s / "class_presence.png").exists()
    assert main(["baseline", "--config", str(cfg_file), "--manifest", m, "--out", str(b)]) == 0
    assert main(["plot", "--metrics", str(t / "metrics.jsonl"), "--out", str(tmp_path / "p")]) == 0
    assert main(["plot", "--out", str(tmp_path / "p")]) == 1


def test_align_commands(tmp_path):
    rng = np.random.default_rng(0)
    a = (rng.normal(size=8000) * 2000).astype(np.int16)
    b = np.zeros_like(a)
    b[250:] = a[:-250]
    wavfile.write(tmp_path / "a.wav", 8000, a)
    wavfile.write(tmp_path / "b.wav", 8000, b)
    assert main(["align", "sync", "--a", str(tmp_path / "a.wav"), "--b", str(tmp_path / "b.wav"),
                 "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "sync.json").read_text())["shift_samples"] == 250

    src = rng.uniform(0, 500, size=(30, 2))
    dst = src * 1.5 + [20, -10]
    np.savetxt(tmp_path / "c.txt", np.c_[src, dst])
    np.savetxt(tmp_path / "p.txt", [[0, 0], [10, 10]])
    np.savetxt(tmp_path / "m.txt", [[20, -10], [35, 5]])
    assert main(["align", "transfer", "--correspondences", str(tmp_path / "c.txt"),
                 "--points", str(tmp_path / "p.txt"), "--manual", str(tmp_path / "m.txt"),
                 "--out", str(tmp_path / "t")]) == 0
    out = json.loads((tmp_path / "t" / "transfer.json").read_text())
    assert out["audit"]["mean"] < 1e-6

    np.savetxt(tmp_path / "r.txt", rng.uniform(0, 500, size=(30, 4)))
    assert main(["align", "transfer", "--correspondences", str(tmp_path / "r.txt"),
                 "--out", str(tmp_path / "r")]) == 3
