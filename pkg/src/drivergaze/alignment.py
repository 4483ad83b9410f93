"""Audio time-shift estimation and homography-based gaze-point transfer."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .data import GazePoint
from .errors import (DegenerateConfigurationError, EstimationFailedError, PointAtInfinityError,
                     ValidationError)
from .evaluation import ErrorSummary, pixel_error, summarize_errors

DEFAULT_MAX_LAG_SECONDS = 60.0
DEFAULT_MIN_CONFIDENCE = 1.5


# ---------------------------------------------------------------- audio sync

@dataclass(frozen=True)
class TimeShift:
    shift: int
    confidence: float
    low_confidence: bool

    def seconds(self, rate: int) -> float:
        return self.shift / rate


def estimate_time_shift(audio_a, rate_a: int, audio_b, rate_b: int,
                        max_lag_seconds: Optional[float] = DEFAULT_MAX_LAG_SECONDS,
                        min_confidence: float = DEFAULT_MIN_CONFIDENCE) -> TimeShift:
    """Lag s (in samples) such that b[n] ~ a[n - s], from the normalized cross-correlation peak.

    confidence is the peak height over the highest other local maximum.
    """
    if rate_a != rate_b:
        raise ValidationError(f"sample rates differ ({rate_a} vs {rate_b})")
    a = _mono(audio_a)
    b = _mono(audio_b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValidationError("cannot synchronize a silent signal")
    corr = signal.correlate(b, a, mode="full", method="fft") / (na * nb)
    lags = signal.correlation_lags(len(b), len(a), mode="full")
    if max_lag_seconds is not None:
        keep = np.abs(lags) <= int(round(max_lag_seconds * rate_a))
        corr, lags = corr[keep], lags[keep]
    best = int(np.argmax(corr))
    peak = float(corr[best])
    peaks, _ = signal.find_peaks(corr)
    others = corr[peaks[peaks != best]]
    runner_up = float(others.max()) if others.size else 0.0
    confidence = peak / runner_up if runner_up > 0 else float("inf")
    return TimeShift(int(lags[best]), confidence, confidence < min_confidence)


def _mono(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.ndim != 1 or x.size == 0:
        raise ValidationError("audio must be a non-empty 1-D (or frames x channels) array")
    return x - x.mean()


def read_wav(path) -> tuple[np.ndarray, int]:
    rate, data = wavfile.read(path)
    return np.asarray(data, dtype=np.float64), int(rate)


# ---------------------------------------------------------------- homographies

@dataclass(frozen=True, eq=False)
class Homography:
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.shape != (3, 3) or not np.all(np.isfinite(h)):
            raise ValidationError("homography must be a finite 3x3 matrix")
        if abs(h[2, 2]) < 1e-12:
            raise DegenerateConfigurationError("homography has h[2][2] == 0")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) <= 1e-12:
            raise DegenerateConfigurationError("homography is singular")
        object.__setattr__(self, "h", h)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.h))

    def apply(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        q = np.c_[pts, np.ones(len(pts))] @ self.h.T
        if np.any(np.abs(q[:, 2]) < 1e-12):
            raise PointAtInfinityError("point maps to infinity")
        return q[:, :2] / q[:, 2:3]

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))


def transfer_point(h: Homography, p) -> GazePoint:
    xy = p.as_array() if isinstance(p, GazePoint) else np.asarray(p, dtype=np.float64)
    if not np.all(np.isfinite(xy)):
        raise ValidationError("non-finite point")
    q = h.apply(xy)[0]
    return GazePoint(float(q[0]), float(q[1]))


def _normalizer(pts: np.ndarray) -> np.ndarray:
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d == 0:
        raise DegenerateConfigurationError("all points coincide")
    s = np.sqrt(2) / d
    return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])


def _collinear(p, q, r, tol) -> bool:
    return abs((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])) <= tol


def _has_collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    return any(_collinear(pts[i], pts[j], pts[k], tol)
               for i, j, k in itertools.combinations(range(len(pts)), 3))


def dlt_homography(src, dst) -> Homography:
    """Normalized direct linear transform over >= 4 correspondences."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst) or len(src) < 4:
        raise ValidationError("need >= 4 aligned correspondences")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValidationError("non-finite correspondence")
    ts, td = _normalizer(src), _normalizer(dst)
    s = np.c_[src, np.ones(len(src))] @ ts.T
    d = np.c_[dst, np.ones(len(dst))] @ td.T
    if len(src) == 4 and (_has_collinear_triple(s[:, :2], 1e-9)
                          or _has_collinear_triple(d[:, :2], 1e-9)):
        raise DegenerateConfigurationError("three of the four points are collinear")
    n = len(src)
    A = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    one, zero = np.ones(n), np.zeros(n)
    A[0::2] = np.c_[x, y, one, zero, zero, zero, -u * x, -u * y, -u]
    A[1::2] = np.c_[zero, zero, zero, x, y, one, -v * x, -v * y, -v]
    _, sv, vt = np.linalg.svd(A)
    if sv[7] <= 1e-10 * sv[0]:
        raise DegenerateConfigurationError("correspondences do not determine a homography")
    hn = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(td) @ hn @ ts)


@dataclass(frozen=True, eq=False)
class RansacResult:
    homography: Homography
    inliers: np.ndarray
    support: int


def ransac_homography(src, dst, iters: int = 1000, inlier_px: float = 3.0,
                      rng: Optional[np.random.Generator] = None,
                      min_support: int = 4) -> RansacResult:
    """Robust homography by consensus over random minimal samples.

    Each hypothesis is scored by its support: the number of correspondences
    outside its own minimal sample that it transfers within ``inlier_px``.
    The best hypothesis is refit on its inliers until the inlier set is
    stable.  Fewer than ``min_support`` supporting points raises
    EstimationFailedError.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst) or len(src) < 4:
        raise ValidationError("need >= 4 aligned correspondences")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(src)
    best_support, best_h = -1, None
    for _ in range(iters):
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = dlt_homography(src[idx], dst[idx])
            err = _transfer_errors(h, src, dst)
        except (DegenerateConfigurationError, ValidationError):
            continue
        ok = err < inlier_px
        ok[idx] = False
        support = int(ok.sum())
        if support > best_support:
            best_support, best_h = support, h
    if best_h is None or best_support < min_support:
        raise EstimationFailedError(
            f"no homography supported by >= {min_support} correspondences "
            f"(best support {max(best_support, 0)})")

    mask = _transfer_errors(best_h, src, dst) < inlier_px
    h = best_h
    for _ in range(20):
        try:
            h = dlt_homography(src[mask], dst[mask])
        except DegenerateConfigurationError:
            break
        new = _transfer_errors(h, src, dst) < inlier_px
        if np.array_equal(new, mask):
            break
        mask = new
    if mask.sum() < 4:
        raise EstimationFailedError("refit lost the consensus set")
    return RansacResult(h, mask, best_support)


def _transfer_errors(h: Homography, src, dst) -> np.ndarray:
    q = np.c_[src, np.ones(len(src))] @ h.h.T
    w = q[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        pts = q[:, :2] / w[:, None]
        err = np.linalg.norm(pts - dst, axis=1)
    err[~np.isfinite(err) | (np.abs(w) < 1e-12)] = np.inf
    return err


def audit_transfers(transferred: Sequence, manual: Sequence, **kw) -> ErrorSummary:
    """Error summary of transferred gaze points against manual annotations."""
    if len(transferred) != len(manual):
        raise ValidationError(f"length mismatch: {len(transferred)} vs {len(manual)}")
    return summarize_errors([pixel_error(a, b) for a, b in zip(transferred, manual)], **kw)


def read_points(path, columns: int) -> np.ndarray:
    data = np.loadtxt(Path(path), dtype=np.float64, ndmin=2)
    if data.shape[1] != columns:
        raise ValidationError(f"{path}: expected {columns} columns per line, got {data.shape[1]}")
    return data
