"""Error metrics, AUC, baselines, ablations and leave-one-subject-out."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import BoundingBox, DatasetManifest, GazePoint, Landmarks
from .errors import ValidationError

log = logging.getLogger(__name__)

DEFAULT_CDF_THRESHOLDS = tuple(float(t) for t in range(0, 201, 5))

# (pixel error, eye-angle degrees) for the reference 1280x720 scene camera.
REFERENCE_ERROR_ANGLE_PAIRS = (
    (159.95, 15.87), (140.78, 13.97), (124.00, 12.30), (151.82, 15.06),
    (155.31, 15.41), (198.44, 19.69), (154.53, 15.33), (184.84, 18.34),
    (70.24, 6.97), (29.69, 2.95), (121.19, 12.02), (48.59, 4.82),
)


def _xy(p) -> np.ndarray:
    if isinstance(p, GazePoint):
        return p.as_array()
    return np.asarray(p, dtype=np.float64)


def pixel_error(pred, gt) -> float:
    return float(np.linalg.norm(_xy(pred) - _xy(gt)))


@dataclass(frozen=True)
class ErrorSummary:
    mean: float
    median: float
    cdf: tuple[tuple[float, float], ...]
    count: int = 0

    def to_dict(self) -> dict:
        return {"mean": self.mean, "median": self.median, "count": self.count,
                "cdf": [list(c) for c in self.cdf]}


def summarize_errors(errors: Sequence[float],
                     thresholds: Sequence[float] = DEFAULT_CDF_THRESHOLDS) -> ErrorSummary:
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValidationError("cannot summarize an empty error list")
    ts = sorted(float(t) for t in thresholds)
    cdf = tuple((t, float(np.count_nonzero(e <= t)) / e.size) for t in ts)
    return ErrorSummary(float(e.mean()), float(np.median(e)), cdf, int(e.size))


@dataclass(frozen=True)
class AngleModel:
    deg_per_px: float

    def __post_init__(self):
        if not self.deg_per_px > 0:
            raise ValidationError("deg_per_px must be positive")


def px_to_degrees(err: float, model: AngleModel) -> float:
    if err < 0:
        raise ValidationError("pixel error must be non-negative")
    return err * model.deg_per_px


def fit_angle_model(pairs: Sequence[tuple[float, float]]) -> AngleModel:
    """Least-squares slope through the origin of degrees against pixels."""
    a = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    px, deg = a[:, 0], a[:, 1]
    denom = float(px @ px)
    if a.size == 0 or denom == 0:
        raise ValidationError("angle fit needs at least one pair with non-zero pixels")
    return AngleModel(float(px @ deg) / denom)


REFERENCE_ANGLE_MODEL = fit_angle_model(REFERENCE_ERROR_ANGLE_PAIRS)


# ---------------------------------------------------------------- AUC

def _auc_against(pred, gt, negatives: np.ndarray) -> float:
    pos = -np.linalg.norm(_xy(gt) - _xy(pred))
    neg = -np.linalg.norm(negatives - _xy(pred), axis=1)
    return (np.count_nonzero(neg < pos) + 0.5 * np.count_nonzero(neg == pos)) / len(neg)


def auc_score(pred, gt, image_size, negatives: int, rng: np.random.Generator) -> float:
    """AUC of ranking the true fixation above uniformly sampled in-frame locations.

    The score map is the negative distance to the predicted point.
    """
    if negatives < 1:
        raise ValidationError("auc_score needs at least one negative")
    w, h = image_size
    q = rng.uniform((0.0, 0.0), (float(w), float(h)), size=(negatives, 2))
    return float(_auc_against(pred, gt, q))


def auc_full_grid(pred, gt, image_size) -> float:
    """Same AUC with every pixel centre as a negative."""
    w, h = image_size
    xx, yy = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    return float(_auc_against(pred, gt, np.stack([xx.ravel(), yy.ravel()], axis=1)))


def mean_auc(preds, gts, image_size, negatives: int, rng: np.random.Generator) -> float:
    preds, gts = np.asarray(preds, float), np.asarray(gts, float)
    return float(np.mean([auc_score(p, g, image_size, negatives, rng)
                          for p, g in zip(preds, gts)]))


# ---------------------------------------------------------------- baselines

def baseline_center(image_size) -> GazePoint:
    w, h = image_size
    return GazePoint(w / 2, h / 2)


def baseline_fixed(train_gazes: Sequence) -> GazePoint:
    if len(train_gazes) == 0:
        raise ValidationError("fixed-point baseline needs training gazes")
    m = np.mean([_xy(g) for g in train_gazes], axis=0)
    return GazePoint(float(m[0]), float(m[1]))


def landmark_features(landmarks: Landmarks) -> np.ndarray:
    """Eye-corner coordinates, plus pupil centres when the index map names them."""
    idx = landmarks.index
    order = [*idx.left_eye, *idx.right_eye]
    order += [i for i in (idx.left_pupil, idx.right_pupil) if i is not None]
    return np.concatenate([landmarks.point(i) for i in order])


class LinearGazeRegressor:
    """Ordinary least squares with intercept, one output per coordinate.

    Falls back to a lightly regularized ridge when the centred design is
    rank deficient; ``used_ridge`` records that.
    """

    ridge = 1e-9

    def fit(self, features, gazes) -> "LinearGazeRegressor":
        X = np.asarray(features, dtype=np.float64)
        Y = np.asarray([_xy(g) for g in gazes])
        if X.ndim != 2 or len(X) != len(Y):
            raise ValidationError("features must be an n x d array aligned with gazes")
        if len(X) < X.shape[1] + 1:
            raise ValidationError(f"need at least {X.shape[1] + 1} training rows, got {len(X)}")
        self.x_mean, self.y_mean = X.mean(0), Y.mean(0)
        Xc, Yc = X - self.x_mean, Y - self.y_mean
        self.used_ridge = np.linalg.matrix_rank(Xc) < X.shape[1]
        if self.used_ridge:
            warnings.warn("rank-deficient design; using ridge fallback", RuntimeWarning,
                          stacklevel=2)
            scale = max(float(np.trace(Xc.T @ Xc)), 1.0)
            A = Xc.T @ Xc + self.ridge * scale * np.eye(X.shape[1])
            self.coef = np.linalg.solve(A, Xc.T @ Yc)
        else:
            self.coef = np.linalg.lstsq(Xc, Yc, rcond=None)[0]
        return self

    def predict(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        return (X - self.x_mean) @ self.coef + self.y_mean


def baseline_linreg(train: Sequence[tuple], test_features) -> list[GazePoint]:
    feats = [f for f, _ in train]
    gazes = [g for _, g in train]
    pred = LinearGazeRegressor().fit(feats, gazes).predict(test_features)
    return [GazePoint(float(x), float(y)) for x, y in pred]


def baseline_car_in_front(boxes: Sequence[BoundingBox], image_size) -> tuple[GazePoint, bool]:
    """Centre of the car box nearest the image centre; (point, fell_back_to_center)."""
    center = baseline_center(image_size)
    cars = [b for b in boxes if b.label == "car"]
    if not cars:
        return center, True
    c = center.as_array()
    best = min(cars, key=lambda b: float(np.hypot(*(np.array(b.center) - c))))
    return GazePoint(*best.center), False


# ---------------------------------------------------------------- manifest-level evaluation

def gaze_records(manifest: DatasetManifest, split: Optional[str] = None, sessions=None):
    for s in manifest.sessions:
        if split is not None and manifest.split.get(s.session_id) != split:
            continue
        if sessions is not None and s.session_id not in sessions:
            continue
        for r in s.samples:
            if r.gaze is not None:
                yield s, r


def scene_size(manifest: DatasetManifest) -> tuple[int, int]:
    from .data import read_image
    for s in manifest.sessions:
        for r in s.samples:
            h, w = read_image(manifest.resolve(r.scene)).shape[:2]
            return (w, h)
    raise ValidationError("manifest has no samples")


@dataclass
class MethodResult:
    method: str
    predictions: np.ndarray
    errors: np.ndarray
    summary: ErrorSummary
    auc: float
    note: str = ""

    def row(self, angle: AngleModel = REFERENCE_ANGLE_MODEL) -> dict:
        return {"method": self.method, "mean": self.summary.mean, "median": self.summary.median,
                "eye_angle": px_to_degrees(self.summary.mean, angle), "auc": self.auc,
                "count": self.summary.count, "note": self.note}


def score_method(method: str, preds, gts, image_size, rng, auc_negatives: int = 1000,
                 note: str = "") -> MethodResult:
    preds, gts = np.asarray(preds, float), np.asarray(gts, float)
    errors = np.linalg.norm(preds - gts, axis=1)
    return MethodResult(method, preds, errors, summarize_errors(errors),
                        mean_auc(preds, gts, image_size, auc_negatives, rng), note)


def evaluate_baselines(manifest: DatasetManifest, image_size, seed: int = 0,
                       auc_negatives: int = 1000, train_sessions=None,
                       test_sessions=None) -> list[MethodResult]:
    train = list(gaze_records(manifest, "train", train_sessions))
    test = list(gaze_records(manifest, "test", test_sessions))
    if not train or not test:
        raise ValidationError("baselines need gaze-annotated train and test samples")
    gts = np.array([r.gaze for _, r in test])
    rng = np.random.default_rng(seed)
    results = []

    center = baseline_center(image_size).as_array()
    results.append(score_method("center-point", np.tile(center, (len(test), 1)), gts,
                                image_size, rng, auc_negatives))

    fixed = baseline_fixed([r.gaze for _, r in train]).as_array()
    results.append(score_method("fixed-point", np.tile(fixed, (len(test), 1)), gts,
                                image_size, rng, auc_negatives))

    def feats(pairs):
        return np.array([landmark_features(Landmarks(r.landmarks, manifest.landmark_index))
                         for _, r in pairs])

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        lin = LinearGazeRegressor().fit(feats(train), [r.gaze for _, r in train])
    results.append(score_method("linear-regression", lin.predict(feats(test)), gts, image_size,
                                rng, auc_negatives, note="ridge fallback" if caught else ""))

    car_preds, fallbacks = [], 0
    for _, r in test:
        p, fell_back = baseline_car_in_front(r.boxes, image_size)
        car_preds.append(p.as_array())
        fallbacks += fell_back
    results.append(score_method("car-in-front", car_preds, gts, image_size, rng, auc_negatives,
                                note=f"{fallbacks} frames without a car box"))
    return results


# ---------------------------------------------------------------- embeddings

@dataclass(frozen=True)
class EmbeddingSeparation:
    intra: float
    inter: float
    gap_ci: tuple[float, float]

    @property
    def gap(self) -> float:
        return self.inter - self.intra


def embedding_separation(embeddings, sessions, rng: np.random.Generator, n_boot: int = 1000,
                         max_samples: int = 300) -> EmbeddingSeparation:
    """Mean intra- vs inter-session embedding distance with a bootstrap CI on the gap."""
    emb = np.asarray(embeddings, dtype=np.float64)
    sessions = np.asarray(sessions)
    if len(np.unique(sessions)) < 2:
        raise ValidationError("need at least two sessions")
    if len(emb) > max_samples:
        keep = np.sort(rng.choice(len(emb), size=max_samples, replace=False))
        emb, sessions = emb[keep], sessions[keep]

    def means(idx):
        e, s = emb[idx], sessions[idx]
        d = np.linalg.norm(e[:, None] - e[None], axis=2)
        same = s[:, None] == s[None]
        # a resampled point paired with its own copy is not an intra-session pair
        off = idx[:, None] != idx[None]
        intra = d[same & off]
        inter = d[~same]
        return intra.mean() if intra.size else np.nan, inter.mean() if inter.size else np.nan

    intra, inter = means(np.arange(len(emb)))
    gaps = []
    for _ in range(n_boot):
        a, b = means(rng.integers(len(emb), size=len(emb)))
        if np.isfinite(a) and np.isfinite(b):
            gaps.append(b - a)
    lo, hi = np.percentile(gaps, [2.5, 97.5])
    return EmbeddingSeparation(float(intra), float(inter), (float(lo), float(hi)))


# ---------------------------------------------------------------- model evaluation

def evaluate_model(model, data, image_size, rng, name: str = "DPEN",
                   auc_negatives: int = 1000) -> tuple[MethodResult, np.ndarray]:
    from .training import predict
    points, emb = predict(model, data)
    return score_method(name, points, data.gaze.double().numpy(), image_size, rng,
                        auc_negatives), emb


def write_report(results: Sequence[MethodResult], report_dir, extra: Optional[dict] = None,
                 plot_method: Optional[str] = None) -> Path:
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    report = {"methods": [r.row() for r in results],
              "deg_per_px": REFERENCE_ANGLE_MODEL.deg_per_px,
              "cdf": {r.method: [list(c) for c in r.summary.cdf] for r in results}}
    if extra:
        report.update(extra)
    path = report_dir / "report.json"
    path.write_text(json.dumps(report, indent=1) + "\n")
    target = next((r for r in results if r.method == plot_method), None)
    if target is not None:
        from .plots import plot_error_distribution
        plot_error_distribution(target.errors, report_dir, title=target.method)
    return path


# ---------------------------------------------------------------- protocols

ABLATIONS = {
    "full": dict(use_triplet=True, use_scene=True),
    "no-triplet": dict(use_triplet=False, use_scene=True),
    "no-scene": dict(use_triplet=True, use_scene=False),
}


@dataclass
class AblationResult:
    results: dict
    baselines: list
    embeddings: dict
    test_sessions: np.ndarray


def run_ablations(manifest: DatasetManifest, cfg, out_dir, variants=tuple(ABLATIONS),
                  seed: int = 0, auc_negatives: int = 1000) -> AblationResult:
    """Train each variant with identical data and seed; score on the test split."""
    from .training import build_tensors, train
    out_dir = Path(out_dir)
    size = scene_size(manifest)
    train_data = build_tensors(manifest, cfg.model.input_side, "train")
    test_data = build_tensors(manifest, cfg.model.input_side, "test", train_data.facial_roi)
    results, embeddings = {}, {}
    for name in variants:
        vcfg = replace(cfg, **ABLATIONS[name])
        trained = train(manifest, vcfg, out_dir / name, data=train_data)
        res, emb = evaluate_model(trained.model, test_data, size,
                                  np.random.default_rng(seed), name, auc_negatives)
        results[name], embeddings[name] = res, emb
        log.info("%s: mean test error %.3f", name, res.summary.mean)
    baselines = evaluate_baselines(manifest, size, seed, auc_negatives)
    return AblationResult(results, baselines, embeddings, test_data.sessions)


@dataclass
class LosoResult:
    subject: str
    held_out_sessions: list
    train_sessions: list
    summary: Optional[ErrorSummary]
    full_summary: Optional[ErrorSummary] = None
    skipped: str = ""


def leave_one_subject_out(manifest: DatasetManifest, cfg, out_dir,
                          compare_full: bool = False) -> dict[str, LosoResult]:
    """One model per test subject, trained without any of that subject's sessions."""
    from .training import build_tensors, train
    out_dir = Path(out_dir)
    subjects = manifest.subjects()
    tested = sorted(subj for subj, ss in subjects.items()
                    if any(manifest.split.get(s) == "test" for s in ss))
    if len(tested) < 2:
        raise ValidationError("leave-one-subject-out needs >= 2 subjects with test sessions")
    size = scene_size(manifest)
    train_data = build_tensors(manifest, cfg.model.input_side, "train")
    test_data = build_tensors(manifest, cfg.model.input_side, "test", train_data.facial_roi)

    full = None
    if compare_full:
        full = train(manifest, cfg, out_dir / "full", data=train_data).model

    results = {}
    for subj in tested:
        own = set(subjects[subj])
        held_out = sorted(s for s in own if manifest.split.get(s) == "test")
        remaining = sorted(s.session_id for s in manifest.sessions_in("train")
                           if s.session_id not in own)
        if len(remaining) < 2:
            results[subj] = LosoResult(subj, held_out, remaining, None,
                                       skipped="removing the subject leaves < 2 train sessions")
            log.warning("LOSO: skipping subject %s", subj)
            continue
        trained = train(manifest, cfg, out_dir / f"loso_{subj}", data=train_data,
                        exclude_sessions=own)
        subj_test = test_data.of_sessions(held_out)
        res, _ = evaluate_model(trained.model, subj_test, size, np.random.default_rng(0),
                                f"loso-{subj}")
        full_summary = None
        if full is not None:
            full_summary = evaluate_model(full, subj_test, size, np.random.default_rng(0),
                                          "full")[0].summary
        results[subj] = LosoResult(subj, held_out, list(trained.train_sessions), res.summary,
                                   full_summary)
    return results
