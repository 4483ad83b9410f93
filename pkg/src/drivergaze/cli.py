"""Command-line entry point: ``drivergaze <command> ...``.

Every command writes into its ``--out`` directory and leaves a ``run.json``
recording the resolved configuration, its hash, the seed and the artifacts.
Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DriverGazeError, ValidationError

log = logging.getLogger("drivergaze")

EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 1, 2, 3
CONFIG_SECTIONS = ("world", "train", "eval", "align", "stats")
RUN_KEYS = {"rng_seed", "out", *CONFIG_SECTIONS}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- run config

def load_run_config(path) -> dict:
    """Read a JSON run config; only the known top-level sections are allowed."""
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: top level must be an object")
    unknown = set(cfg) - RUN_KEYS
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    for k in CONFIG_SECTIONS:
        if k in cfg and not isinstance(cfg[k], dict):
            raise ValidationError(f"{path}: section {k!r} must be an object")
    return cfg


def _seed(args, cfg: dict, required: bool) -> int | None:
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.get("rng_seed")
    if seed is None and required:
        raise ValidationError("a seed is required: pass --seed or set rng_seed in the config")
    if seed is not None and (not isinstance(seed, int) or isinstance(seed, bool) or seed < 0):
        raise ValidationError(f"rng_seed must be a non-negative integer, got {seed!r}")
    return seed


def _section_keys(section: dict, allowed: set, name: str) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise ValidationError(f"unknown {name} config keys: {sorted(unknown)}")
    return section


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_run_manifest(out: Path, command: str, config: dict, seed, argv) -> Path:
    path = out / "run.json"
    artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*")
                       if p.is_file() and p != path)
    record = {
        "command": command,
        "argv": list(argv),
        "version": __version__,
        "rng_seed": seed,
        "config": config,
        "config_hash": hashlib.sha256(_canonical(config).encode()).hexdigest(),
        "artifacts": artifacts,
    }
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    return path


def _out(args, cfg) -> Path:
    out = args.out or cfg.get("out")
    if not out:
        raise UsageError("--out is required")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands

def cmd_generate(args, cfg):
    from .world import WorldConfig, generate_dataset
    seed = _seed(args, cfg, required=True)
    world = WorldConfig.from_dict({**cfg.get("world", {}), "rng_seed": seed})
    out = _out(args, cfg)
    manifest = generate_dataset(world, out)
    print(f"wrote {sum(len(s.samples) for s in manifest.sessions)} samples "
          f"in {len(manifest.sessions)} sessions to {out}")
    return {"world": world.to_dict()}, seed


def _train_config(args, cfg, seed):
    from .evaluation import ABLATIONS
    from .training import TrainConfig
    tcfg = TrainConfig.from_dict({**cfg.get("train", {}), "rng_seed": seed})
    if getattr(args, "ablation", None):
        tcfg = replace(tcfg, **ABLATIONS[args.ablation])
    return tcfg


def cmd_train(args, cfg):
    from .data import load_manifest
    from .plots import plot_training_curves
    from .training import train
    seed = _seed(args, cfg, required=True)
    tcfg = _train_config(args, cfg, seed)
    manifest = load_manifest(args.manifest)
    out = _out(args, cfg)
    result = train(manifest, tcfg, out, resume=args.resume)
    plot_training_curves(result.metrics, out / "training_curves.png")
    print(f"best epoch {result.best_epoch}: train pixel error "
          f"{result.metrics[result.best_epoch - 1]['pixel_error']:.3f}; checkpoint {result.checkpoint}")
    return {"train": tcfg.to_dict(), "manifest": str(args.manifest)}, seed


EVAL_KEYS = {"auc_negatives", "n_boot", "split"}


def cmd_eval(args, cfg):
    from .data import BoundingBox, load_manifest
    from .evaluation import (embedding_separation, evaluate_baselines, evaluate_model, scene_size,
                             write_report)
    from .training import build_tensors, load_model
    ecfg = _section_keys(cfg.get("eval", {}), EVAL_KEYS, "eval")
    seed = _seed(args, cfg, required=False) or 0
    negatives = int(ecfg.get("auc_negatives", 1000))
    split = ecfg.get("split", "test")
    manifest = load_manifest(args.manifest)
    model, ckpt = load_model(args.checkpoint)
    roi = BoundingBox(*ckpt["facial_roi"])
    data = build_tensors(manifest, model.cfg.input_side, split, roi)
    size = scene_size(manifest)
    res, emb = evaluate_model(model, data, size, np.random.default_rng(seed), "DPEN", negatives)
    results = [res] + evaluate_baselines(manifest, size, seed, negatives)
    extra = {"split": split, "checkpoint_epoch": ckpt["epoch"],
             "per_session": {s: float(res.errors[data.sessions == s].mean())
                             for s in sorted(set(data.sessions))}}
    if len(set(data.sessions)) > 1:
        sep = embedding_separation(emb, data.sessions, np.random.default_rng(seed),
                                   n_boot=int(ecfg.get("n_boot", 1000)))
        extra["embedding"] = {"intra": sep.intra, "inter": sep.inter, "gap": sep.gap,
                              "gap_ci95": list(sep.gap_ci)}
    out = _out(args, cfg)
    path = write_report(results, out, extra, plot_method="DPEN")
    for r in results:
        print(f"{r.method:>18s}  mean {r.summary.mean:8.3f}  median {r.summary.median:8.3f}  "
              f"auc {r.auc:.4f}")
    print(f"report: {path}")
    return {"eval": ecfg, "manifest": str(args.manifest), "checkpoint": str(args.checkpoint)}, seed


def cmd_baseline(args, cfg):
    from .data import load_manifest
    from .evaluation import evaluate_baselines, scene_size, write_report
    ecfg = _section_keys(cfg.get("eval", {}), EVAL_KEYS, "eval")
    seed = _seed(args, cfg, required=False) or 0
    manifest = load_manifest(args.manifest)
    results = evaluate_baselines(manifest, scene_size(manifest), seed,
                                 int(ecfg.get("auc_negatives", 1000)))
    out = _out(args, cfg)
    write_report(results, out, plot_method="fixed-point")
    for r in results:
        print(f"{r.method:>18s}  mean {r.summary.mean:8.3f}  {r.note}")
    return {"eval": ecfg, "manifest": str(args.manifest)}, seed


def cmd_loso(args, cfg):
    from .data import load_manifest
    from .evaluation import leave_one_subject_out
    from .plots import plot_loso
    seed = _seed(args, cfg, required=True)
    tcfg = _train_config(args, cfg, seed)
    manifest = load_manifest(args.manifest)
    out = _out(args, cfg)
    results = leave_one_subject_out(manifest, tcfg, out, compare_full=args.compare_full)
    rows = []
    for subj, r in sorted(results.items()):
        rows.append({"subject": subj, "held_out_sessions": r.held_out_sessions,
                     "train_sessions": r.train_sessions, "skipped": r.skipped,
                     "loso_mean": r.summary.mean if r.summary else None,
                     "loso_median": r.summary.median if r.summary else None,
                     "full_mean": r.full_summary.mean if r.full_summary else None})
        print(f"{subj}: {rows[-1]['loso_mean']}  {r.skipped}")
    (out / "loso.json").write_text(json.dumps(rows, indent=1) + "\n")
    plotted = [r for r in rows if r["loso_mean"] is not None]
    if plotted:
        plot_loso(plotted, out / "loso.png")
    return {"train": tcfg.to_dict(), "manifest": str(args.manifest)}, seed


ALIGN_KEYS = {"max_lag_seconds", "min_confidence", "ransac_iters", "inlier_px"}


def cmd_align(args, cfg):
    from .alignment import (audit_transfers, estimate_time_shift, ransac_homography, read_points,
                            read_wav, transfer_point)
    acfg = _section_keys(cfg.get("align", {}), ALIGN_KEYS, "align")
    seed = _seed(args, cfg, required=False) or 0
    out = _out(args, cfg)
    if args.align_command == "sync":
        a, rate_a = read_wav(args.a)
        b, rate_b = read_wav(args.b)
        ts = estimate_time_shift(a, rate_a, b, rate_b,
                                 acfg.get("max_lag_seconds", 60.0),
                                 acfg.get("min_confidence", 1.5))
        result = {"shift_samples": ts.shift, "shift_seconds": ts.seconds(rate_a),
                  "confidence": ts.confidence, "low_confidence": ts.low_confidence}
        if ts.low_confidence:
            log.warning("low-confidence synchronization (peak ratio %.3f)", ts.confidence)
        print(f"shift {ts.shift} samples ({ts.seconds(rate_a):.6f} s), "
              f"confidence {ts.confidence:.3f}")
        (out / "sync.json").write_text(json.dumps(result, indent=1) + "\n")
        return {"align": acfg, "a": str(args.a), "b": str(args.b)}, seed

    src = read_points(args.correspondences, 4)
    fit = ransac_homography(src[:, :2], src[:, 2:], iters=int(acfg.get("ransac_iters", 1000)),
                            inlier_px=float(acfg.get("inlier_px", 3.0)),
                            rng=np.random.default_rng(seed))
    result = {"homography": fit.homography.h.tolist(), "support": fit.support,
              "inliers": fit.inliers.astype(int).tolist()}
    if args.points is not None:
        pts = read_points(args.points, 2)
        moved = [transfer_point(fit.homography, p) for p in pts]
        result["transferred"] = [[q.x, q.y] for q in moved]
        if args.manual is not None:
            manual = read_points(args.manual, 2)
            s = audit_transfers(moved, manual)
            result["audit"] = {"mean": s.mean, "median": s.median, "count": s.count}
            print(f"audit: mean {s.mean:.3f} px, median {s.median:.3f} px")
    print(f"homography support {fit.support}, inliers {int(fit.inliers.sum())}/{len(src)}")
    (out / "transfer.json").write_text(json.dumps(result, indent=1) + "\n")
    return {"align": acfg, "correspondences": str(args.correspondences)}, seed


def cmd_stats(args, cfg):
    from .data import GazePoint, iter_samples, load_manifest
    from .plots import plot_class_bars
    from .stats import (ClassTable, fixation_class_distribution, image_class_presence,
                        pixel_class_share)
    scfg = _section_keys(cfg.get("stats", {}), {"split"}, "stats")
    manifest = load_manifest(args.manifest)
    classes_path = args.classes or (manifest.resolve(manifest.classes) if manifest.classes else None)
    if classes_path is None:
        raise UsageError("--classes is required when the manifest names no class table")
    table = ClassTable.from_file(classes_path)
    maps, gazes = [], []
    for sample in iter_samples(manifest, split=scfg.get("split")):
        if sample.label_map is None:
            continue
        maps.append(sample.label_map)
        gazes.append(sample.gaze)
    if not maps:
        raise ValidationError("no label maps in the manifest")
    n = len(table)
    presence = image_class_presence(maps, n)
    share = pixel_class_share(maps, n)
    fix = fixation_class_distribution(maps, gazes, n)
    out = _out(args, cfg)
    report = {"classes": list(table.names), "images": len(maps),
              "image_presence": presence.tolist(), "pixel_share": share.tolist(),
              "fixation_share": fix.shares.tolist(), "fixation_counts": fix.counts.tolist(),
              "fixations_skipped": fix.skipped}
    (out / "stats.json").write_text(json.dumps(report, indent=1) + "\n")
    plot_class_bars(table.names, {"images containing class": presence}, out / "class_presence.png")
    plot_class_bars(table.names, {"pixels": share, "fixations": fix.shares},
                    out / "pixels_vs_fixations.png")
    for name, p, s, f in zip(table.names, presence, share, fix.shares):
        print(f"{name:>14s}  images {100 * p:6.2f}%  pixels {100 * s:6.2f}%  fixations {100 * f:6.2f}%")
    return {"stats": scfg, "manifest": str(args.manifest), "classes": str(classes_path)}, None


def cmd_plot(args, cfg):
    from .plots import plot_error_distribution, plot_training_curves
    out = _out(args, cfg)
    if args.metrics is not None:
        metrics = [json.loads(line) for line in Path(args.metrics).read_text().splitlines() if line]
        if not metrics:
            raise ValidationError(f"{args.metrics} holds no epochs")
        plot_training_curves(metrics, out / "training_curves.png")
    if args.errors is not None:
        errors = np.loadtxt(args.errors, ndmin=1)
        plot_error_distribution(errors, out, title=Path(args.errors).stem)
    if args.metrics is None and args.errors is None:
        raise UsageError("give --metrics and/or --errors")
    return {"metrics": args.metrics and str(args.metrics), "errors": args.errors and str(args.errors)}, None


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drivergaze", description="Driver point-of-gaze workbench.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--out", type=Path, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides rng_seed from the config")
        return sp

    common(sub.add_parser("generate", help="render a synthetic dataset"))

    sp = common(sub.add_parser("train", help="train a DPEN model"))
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--resume", type=Path, help="checkpoint to continue from")
    sp.add_argument("--ablation", choices=("full", "no-triplet", "no-scene"))

    sp = common(sub.add_parser("eval", help="score a checkpoint against baselines"))
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--checkpoint", type=Path, required=True)

    sp = common(sub.add_parser("baseline", help="score the baselines only"))
    sp.add_argument("--manifest", type=Path, required=True)

    sp = common(sub.add_parser("loso", help="leave-one-subject-out protocol"))
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--compare-full", action="store_true")
    sp.add_argument("--ablation", choices=("full", "no-triplet", "no-scene"))

    sp = sub.add_parser("align", help="audio sync and gaze transfer")
    asub = sp.add_subparsers(dest="align_command", required=True, parser_class=_Parser)
    s = common(asub.add_parser("sync", help="time shift between two recordings"))
    s.add_argument("--a", type=Path, required=True, help="reference WAV")
    s.add_argument("--b", type=Path, required=True, help="WAV to align")
    s = common(asub.add_parser("transfer", help="RANSAC homography and point transfer"))
    s.add_argument("--correspondences", type=Path, required=True,
                   help="text file, one 'x y u v' correspondence per line")
    s.add_argument("--points", type=Path, help="'x y' points to transfer")
    s.add_argument("--manual", type=Path, help="'x y' manual annotations for the audit")

    sp = common(sub.add_parser("stats", help="semantic scene statistics"), seed=False)
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--classes", type=Path)
    sp.add_argument("--report", type=Path, dest="out", help="alias of --out")

    sp = common(sub.add_parser("plot", help="figures from metrics or error files"), seed=False)
    sp.add_argument("--metrics", type=Path, help="metrics.jsonl from training")
    sp.add_argument("--errors", type=Path, help="text file of per-sample errors")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "baseline": cmd_baseline, "loso": cmd_loso, "align": cmd_align,
            "stats": cmd_stats, "plot": cmd_plot}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config)
        resolved, seed = COMMANDS[args.command](args, cfg)
        out = _out(args, cfg)
        write_run_manifest(out, args.command, resolved, seed, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"drivergaze: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, FileNotFoundError) as exc:
        print(f"drivergaze: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DriverGazeError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"drivergaze: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
