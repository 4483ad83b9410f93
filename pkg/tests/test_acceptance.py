"""Acceptance criteria 1-12.

Each test records a PASS/FAIL line; conftest prints them all at the end of the run.
Run alone with ``python3 -m pytest tests/test_acceptance.py -v``.
"""
import json
import warnings

import numpy as np
import pytest
import torch

import oracles as O
from drivergaze.cli import main as cli_main
from drivergaze.data import DatasetManifest, SessionRecord, split_sessions
from drivergaze.evaluation import (REFERENCE_ERROR_ANGLE_PAIRS, auc_full_grid, auc_score,
                                   embedding_separation, fit_angle_model,
                                   leave_one_subject_out, mean_auc, px_to_degrees,
                                   run_ablations)
from drivergaze.losses import LossConfig, weighted_distance_loss
from drivergaze.model import ModelConfig, build_model
from drivergaze.stats import (fixation_class_distribution, image_class_presence,
                              pixel_class_share)
from drivergaze.training import TrainConfig, read_checkpoint
from drivergaze.world import WorldConfig, generate_dataset
from test_alignment import _outlier_problem, delayed, noise
from test_losses import _finite_difference_check
from test_stats import random_corpus

RESULTS: dict[int, str] = {}

# criterion 4/5 setup: 6 sessions of 500 frames, two subjects -> 4 train / 2 test sessions
ABLATION_WORLD = WorldConfig(n_sessions=6, samples_per_session=500, sessions_per_subject=3,
                             face_coupling=0.0, cabin_marker=True, rng_seed=0)
ABLATION_TRAIN = TrainConfig(learning_rate=1e-3, batch_size=64, epochs=10, rng_seed=0,
                             model=ModelConfig.desk((64, 64)))


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_c01_loss_exactness():
    c = LossConfig()
    d = torch.tensor([[c.tau, 0.0], [0.0, 0.0], [8.0, 0.0], [30.0, 0.0]], dtype=torch.float64)
    got = weighted_distance_loss(d, torch.zeros_like(d)).tolist()
    want = [0.0, -c.alpha * c.tau, c.beta * (8 - c.tau), c.beta * (30 - c.tau)]
    worst = max(abs(g - w) for g, w in zip(got, want))
    verdict(1, (c.alpha, c.beta, c.tau) == (0.1, 2.0, 5.0) and worst < 1e-9,
            f"max deviation {worst:.1e}")


def test_c02_gradient_fidelity():
    rng = np.random.default_rng(2024)
    rels = []
    while len(rels) < 20:
        rel = _finite_difference_check(rng)
        if rel is not None:
            rels.append(rel)
    verdict(2, max(rels) < 1e-4, f"worst relative error over 20 batches {max(rels):.1e}")


def test_c03_embedding_unit_norm():
    model = build_model(ModelConfig.desk(), seed=0).eval()
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    with torch.no_grad():
        for scale in (1e-3, 1.0, 1e3, 1.0):
            x = torch.randn(250, 6, 32, 32, generator=g) * scale
            worst = max(worst, (model.calibration(x).norm(dim=1) - 1).abs().max().item())
    verdict(3, worst < 1e-6, f"max |norm - 1| over 1000 inputs {worst:.1e}")


@pytest.fixture(scope="module")
def ablation(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    manifest = generate_dataset(ABLATION_WORLD, out / "world")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return run_ablations(manifest, ABLATION_TRAIN, out / "runs", auc_negatives=200)


@pytest.mark.slow
def test_c04_ablation_directions(ablation):
    err = {k: r.summary.mean for k, r in ablation.results.items()}
    fixed = next(b for b in ablation.baselines if b.method == "fixed-point").summary.mean
    a = err["full"] < 0.5 * fixed
    b = err["no-triplet"] > 1.5 * err["full"]
    c = err["full"] < err["no-scene"] < err["no-triplet"]
    verdict(4, a and b and c,
            f"full {err['full']:.2f}  no-triplet {err['no-triplet']:.2f}  "
            f"no-scene {err['no-scene']:.2f}  fixed {fixed:.2f} px | "
            f"(a) {'ok' if a else 'no'} ratio {err['full'] / fixed:.3f}  "
            f"(b) {'ok' if b else 'no'} ratio {err['no-triplet'] / err['full']:.3f}  "
            f"(c) {'ok' if c else 'no'}")


@pytest.mark.slow
def test_c05_calibration_clustering(ablation):
    sep = embedding_separation(ablation.embeddings["full"], ablation.test_sessions,
                               np.random.default_rng(0), n_boot=1000)
    verdict(5, sep.intra < sep.inter and sep.gap_ci[0] > 0,
            f"intra {sep.intra:.3f}  inter {sep.inter:.3f}  "
            f"gap 95% CI [{sep.gap_ci[0]:.3f}, {sep.gap_ci[1]:.3f}]")


def test_c06_angle_model():
    m = fit_angle_model(REFERENCE_ERROR_ANGLE_PAIRS)
    resid = max(abs(px_to_degrees(e, m) - d) for e, d in REFERENCE_ERROR_ANGLE_PAIRS)
    at = px_to_degrees(29.69, m)
    verdict(6, resid < 0.05 and abs(at - 2.95) <= 0.05,
            f"deg_per_px {m.deg_per_px:.5f}  max residual {resid:.4f} deg  29.69 px -> {at:.3f} deg")


def test_c07_ransac_transfer():
    from drivergaze.alignment import ransac_homography
    from drivergaze.errors import EstimationFailedError
    h, src, dst, bad = _outlier_problem(11)
    fit = ransac_homography(src, dst, rng=np.random.default_rng(0))
    probe = np.random.default_rng(1).uniform(0, 640, size=(100, 2))
    worst = np.abs(fit.homography.apply(probe) - h.apply(probe)).max()
    clean = not fit.inliers[bad].any()
    rng = np.random.default_rng(2)
    try:
        ransac_homography(rng.uniform(0, 640, (40, 2)), rng.uniform(0, 640, (40, 2)),
                          rng=np.random.default_rng(0))
        raised = False
    except EstimationFailedError:
        raised = True
    verdict(7, worst < 0.5 and clean and raised,
            f"max transfer error {worst:.3f} px  outliers excluded {clean}  random input fails {raised}")


def test_c08_audio_sync():
    from drivergaze.alignment import estimate_time_shift
    a = noise(3 * 44100)
    got = [estimate_time_shift(a, 44100, delayed(a, s), 44100).shift for s in (100, 1000, 4410)]
    rng = np.random.default_rng(8)
    anti = True
    for _ in range(20):
        s = int(rng.integers(-3000, 3000))
        x = noise(8000, int(rng.integers(1000)))
        y = delayed(x, s)
        ab, ba = estimate_time_shift(x, 8000, y, 8000), estimate_time_shift(y, 8000, x, 8000)
        anti &= ab.shift == s and ba.shift == -s
    verdict(8, got == [100, 1000, 4410] and anti, f"recovered {got}  antisymmetry {anti}")


def test_c09_auc_sanity():
    rng = np.random.default_rng(9)
    perfect = auc_score((20, 30), (20, 30), (64, 64), 1000, rng)
    preds, gts = rng.uniform(0, 64, (1000, 2)), rng.uniform(0, 64, (1000, 2))
    rand = mean_auc(preds, gts, (64, 64), 200, rng)
    gap = 0.0
    for _ in range(20):
        p, g = rng.uniform(0, 64, 2), rng.uniform(0, 64, 2)
        gap = max(gap, abs(auc_score(p, g, (64, 64), 20000, rng) - auc_full_grid(p, g, (64, 64))))
    verdict(9, perfect == 1.0 and abs(rand - 0.5) <= 0.05 and gap <= 0.02,
            f"perfect {perfect}  random {rand:.4f}  MC vs grid max gap {gap:.4f}")


def _split_violations(manifest) -> int:
    bad = 0
    for ss in manifest.subjects().values():
        labels = [manifest.split[s] for s in ss]
        bad += labels != ["train"] if len(ss) == 1 else labels.count("test") != 1
    return bad


def test_c10_split_and_loso(tmp_path):
    violations = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        sessions = tuple(SessionRecord(f"s{k}_{j}", f"s{k}", ())
                         for k in range(int(rng.integers(1, 8)))
                         for j in range(int(rng.integers(1, 5))))
        violations += _split_violations(split_sessions(DatasetManifest(sessions), seed))

    world = WorldConfig(n_sessions=6, samples_per_session=8, sessions_per_subject=2, rng_seed=10)
    manifest = generate_dataset(world, tmp_path / "w")
    tiny = ModelConfig(input_side=16, backbone_width=4, backbone_depth=2, blocks_per_stage=1,
                       head_hidden=16, output_size=(64, 64), imagenet_stem=False)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=1, model=tiny)
    results = leave_one_subject_out(manifest, cfg, tmp_path / "loso")
    subjects = manifest.subjects()
    leaks = 0
    for subj, r in results.items():
        recorded = read_checkpoint(tmp_path / "loso" / f"loso_{subj}" / "best.pt")["train_sessions"]
        leaks += len(set(subjects[subj]) & set(recorded)) + len(set(subjects[subj]) & set(r.train_sessions))
        leaks += recorded != sorted(r.train_sessions)
    verdict(10, violations == 0 and leaks == 0 and len(results) == 3,
            f"split violations over 1000 seeds {violations}  LOSO leaked sessions {leaks} "
            f"({len(results)} subjects)")


def test_c11_stats_oracle():
    mismatches = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 7))
        maps, gazes = random_corpus(rng, n)
        mismatches += image_class_presence(maps, n).tolist() != O.class_presence(maps, n)
        mismatches += pixel_class_share(maps, n).tolist() != O.pixel_share(maps, n)
        fix = fixation_class_distribution(maps, gazes, n).shares.tolist()
        mismatches += fix != O.fixation_share(maps, [(g.x, g.y) for g in gazes], n)
    verdict(11, mismatches == 0, f"mismatches over 50 corpora x 3 operations {mismatches}")


def test_c12_end_to_end_determinism(tmp_path):
    cfg = {"world": {"n_sessions": 4, "samples_per_session": 16, "sessions_per_subject": 2},
           "train": {"epochs": 2, "batch_size": 8, "learning_rate": 1e-3,
                     "model": {"input_side": 16, "backbone_width": 4, "backbone_depth": 2,
                               "blocks_per_stage": 1, "head_hidden": 16,
                               "output_size": [64, 64], "imagenet_stem": False}},
           "eval": {"auc_negatives": 50, "n_boot": 50}}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    reports = []
    for run in ("a", "b"):
        d = tmp_path / run
        codes = [
            cli_main(["generate", "--config", str(tmp_path / "cfg.json"), "--seed", "12",
                      "--out", str(d / "data")]),
            cli_main(["train", "--config", str(tmp_path / "cfg.json"), "--seed", "12",
                      "--manifest", str(d / "data" / "manifest.json"), "--out", str(d / "train")]),
            cli_main(["eval", "--config", str(tmp_path / "cfg.json"), "--seed", "12",
                      "--manifest", str(d / "data" / "manifest.json"),
                      "--checkpoint", str(d / "train" / "best.pt"), "--out", str(d / "eval")]),
        ]
        assert codes == [0, 0, 0]
        reports.append((d / "eval" / "report.json").read_bytes())
    same_metrics = ((tmp_path / "a" / "train" / "metrics.jsonl").read_bytes()
                    == (tmp_path / "b" / "train" / "metrics.jsonl").read_bytes())
    verdict(12, reports[0] == reports[1] and same_metrics,
            f"report.json identical {reports[0] == reports[1]}  metrics.jsonl identical {same_metrics}")
