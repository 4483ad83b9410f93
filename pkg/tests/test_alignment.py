import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile

import oracles as O
from drivergaze.alignment import (Homography, audit_transfers, dlt_homography,
                                  estimate_time_shift, ransac_homography, read_points, read_wav,
                                  transfer_point)
from drivergaze.data import GazePoint
from drivergaze.errors import (DegenerateConfigurationError, EstimationFailedError,
                               PointAtInfinityError, ValidationError)

RATE = 44100


def noise(n, seed=0):
    return np.random.default_rng(seed).normal(size=n)


def delayed(x, s):
    """x delayed by s samples (s may be negative), zero padded, same length."""
    out = np.zeros_like(x)
    if s >= 0:
        out[s:] = x[:len(x) - s]
    else:
        out[:s] = x[-s:]
    return out


@pytest.mark.parametrize("shift", [100, 1000, 4410])
def test_shift_recovered_exactly(shift):
    a = noise(3 * RATE)
    ts = estimate_time_shift(a, RATE, delayed(a, shift), RATE)
    assert ts.shift == shift
    assert not ts.low_confidence
    assert ts.seconds(RATE) == pytest.approx(shift / RATE)


@settings(max_examples=15, deadline=None)
@given(st.integers(-3000, 3000), st.integers(0, 1000))
def test_shift_antisymmetry(shift, seed):
    a = noise(8000, seed)
    b = delayed(a, shift)
    ab = estimate_time_shift(a, 8000, b, 8000)
    ba = estimate_time_shift(b, 8000, a, 8000)
    assert ab.shift == shift
    assert ba.shift == -ab.shift


def test_periodic_tone_is_low_confidence():
    t = np.arange(RATE) / RATE
    a = np.sin(2 * np.pi * 440 * t)
    ts = estimate_time_shift(a, RATE, delayed(a, 50), RATE)
    assert ts.low_confidence


def test_sync_validation():
    with pytest.raises(ValidationError):
        estimate_time_shift(noise(100), 8000, noise(100), 16000)
    with pytest.raises(ValidationError):
        estimate_time_shift(np.zeros(100), 8000, noise(100), 8000)


def test_stereo_wav_round_trip(tmp_path):
    a = (noise(4000) * 3000).astype(np.int16)
    stereo = np.stack([a, a], axis=1)
    wavfile.write(tmp_path / "a.wav", 8000, stereo)
    wavfile.write(tmp_path / "b.wav", 8000, np.stack([delayed(a, 123)] * 2, axis=1))
    x, rx = read_wav(tmp_path / "a.wav")
    y, ry = read_wav(tmp_path / "b.wav")
    assert estimate_time_shift(x, rx, y, ry).shift == 123


def test_transfer_examples():
    t = Homography(np.array([[1, 0, 10], [0, 1, 5], [0, 0, 1.0]]))
    p = transfer_point(t, GazePoint(0, 0))
    assert (p.x, p.y) == O.FROZEN["h_translate"]
    s = Homography(np.diag([2.0, 2.0, 1.0]))
    p = transfer_point(s, (3, 4))
    assert (p.x, p.y) == O.FROZEN["h_scale2"]


def test_point_at_infinity():
    h = Homography(np.array([[1, 0, 0], [0, 1, 0], [1, 0, 1.0]]))
    with pytest.raises(PointAtInfinityError):
        transfer_point(h, (-1, 0))


def test_singular_homography_rejected():
    with pytest.raises(DegenerateConfigurationError):
        Homography(np.array([[1, 0, 0], [1, 0, 0], [0, 0, 1.0]]))


def test_dlt_translation_exact():
    src = np.array([[0, 0], [100, 0], [0, 100], [100, 100], [50, 30]], float)
    h = dlt_homography(src, src + [10, 5])
    expected = np.array([[1, 0, 10], [0, 1, 5], [0, 0, 1.0]])
    assert np.abs(h.h - expected).max() < 1e-9


def test_dlt_collinear_rejected():
    src = np.array([[0, 0], [1, 1], [2, 2], [0, 5]], float)
    with pytest.raises(DegenerateConfigurationError):
        dlt_homography(src, src)


def random_homography(rng):
    h = np.eye(3) + rng.normal(scale=[[0.1, 0.1, 20], [0.1, 0.1, 20], [1e-4, 1e-4, 0]])
    return Homography(h)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_dlt_matches_oracle_on_random_maps(seed):
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    src = rng.uniform(0, 640, size=(12, 2))
    dst = h.apply(src)
    fit = dlt_homography(src, dst)
    probe = rng.uniform(0, 640, size=(5, 2))
    for p in probe:
        assert fit.apply(p)[0] == pytest.approx(O.homography_apply(h.h, p), abs=1e-6)


def _outlier_problem(seed, n=100, frac=0.3):
    rng = np.random.default_rng(seed)
    h = random_homography(rng)
    src = rng.uniform(0, 640, size=(n, 2))
    dst = h.apply(src) + rng.normal(scale=0.2, size=(n, 2))
    bad = rng.choice(n, size=int(frac * n), replace=False)
    dst[bad] += rng.uniform(40, 200, size=(len(bad), 2)) * rng.choice([-1, 1], size=(len(bad), 2))
    return h, src, dst, bad


@pytest.mark.parametrize("seed", range(3))
def test_ransac_rejects_outliers(seed):
    h, src, dst, bad = _outlier_problem(seed)
    fit = ransac_homography(src, dst, rng=np.random.default_rng(seed))
    assert not fit.inliers[bad].any()
    probe = np.random.default_rng(99).uniform(0, 640, size=(100, 2))
    assert np.abs(fit.homography.apply(probe) - h.apply(probe)).max() < 0.5


def test_ransac_fails_on_random_pairs():
    rng = np.random.default_rng(7)
    src = rng.uniform(0, 640, size=(40, 2))
    dst = rng.uniform(0, 640, size=(40, 2))
    with pytest.raises(EstimationFailedError):
        ransac_homography(src, dst, rng=np.random.default_rng(0))


def test_ransac_is_seed_deterministic():
    _, src, dst, _ = _outlier_problem(5)
    a = ransac_homography(src, dst, rng=np.random.default_rng(3))
    b = ransac_homography(src, dst, rng=np.random.default_rng(3))
    assert np.array_equal(a.homography.h, b.homography.h)


def test_audit_and_points_file(tmp_path):
    s = audit_transfers([GazePoint(0, 0), GazePoint(0, 0), GazePoint(0, 0)],
                        [(9.2, 0), (25.1, 0), (0, 9.2)])
    assert s.median == pytest.approx(9.2)
    with pytest.raises(ValidationError):
        audit_transfers([GazePoint(0, 0)], [])
    (tmp_path / "p.txt").write_text("1 2\n3 4\n")
    assert read_points(tmp_path / "p.txt", 2).tolist() == [[1, 2], [3, 4]]
    with pytest.raises(ValidationError):
        read_points(tmp_path / "p.txt", 4)
