"""The oracles must reproduce the frozen hand-computed values."""

import numpy as np
import pytest

import oracles as O
from oracles import FROZEN


def test_loss_oracles():
    assert O.wdl(0.0) == pytest.approx(FROZEN["wdl_0"])
    assert O.wdl(5.0) == pytest.approx(FROZEN["wdl_tau"])
    assert O.wdl(10.0) == pytest.approx(FROZEN["wdl_10"])
    assert O.triplet(0.5, 0.0) == pytest.approx(FROZEN["trip_a_eq_n"])
    assert O.triplet(0.3, 0.4) == pytest.approx(FROZEN["trip_03_04"])


def test_geometry_oracles():
    assert O.eye_roi((100, 100), (140, 100)) == pytest.approx(FROZEN["eye_roi_1"])
    assert O.eye_roi((0, 0), (0, 20)) == pytest.approx(FROZEN["eye_roi_2"])
    assert O.union_box([(0, 0, 10, 10), (5, 5, 20, 15)]) == FROZEN["facial_roi"]
    assert O.affine_gaze((1, 0), 90, 0.25, (0, 0), 64) == pytest.approx(FROZEN["affine_rot90"])
    assert O.affine_gaze((0.5, 0.5), 0, 0.25, (0, 0), 64) == pytest.approx(
        FROZEN["affine_identity_half"])


def test_transfer_oracles():
    t = [[1, 0, 10], [0, 1, 5], [0, 0, 1]]
    s = [[2, 0, 0], [0, 2, 0], [0, 0, 1]]
    assert O.homography_apply(t, (0, 0)) == pytest.approx(FROZEN["h_translate"])
    assert O.homography_apply(s, (3, 4)) == pytest.approx(FROZEN["h_scale2"])


def test_counting_oracles():
    assert O.pixel_share([[[0, 0], [1, 2]]], 3) == pytest.approx(FROZEN["pixel_share_2x2"])
    assert O.class_presence([[[3]], [[0]]], 4) == [0.5, 0, 0, 0.5]


def test_pad_then_crop_oracle():
    img = np.arange(16).reshape(4, 4)
    out = O.pad_then_crop(img, -1, -1, 2, 2)
    assert out.tolist() == [[0, 0, 0], [0, 0, 1], [0, 4, 5]]


def test_auc_oracle_extremes():
    # prediction on the true point: every other pixel centre scores lower
    assert O.auc_full_grid((0.5, 0.5), (0.5, 0.5), 8, 8) == pytest.approx(1 - 0.5 / 64)
    # prediction in the far corner: nearly everything is closer to it than gt
    assert O.auc_full_grid((31.5, 31.5), (0.0, 0.0), 32, 32) < 0.01
