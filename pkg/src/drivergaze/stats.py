"""Semantic statistics over scene label maps and fixations."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import GazePoint
from .errors import ValidationError


@dataclass(frozen=True)
class ClassTable:
    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise ValidationError("class table is empty")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("duplicate class names")

    def __len__(self):
        return len(self.names)

    @classmethod
    def from_file(cls, path) -> "ClassTable":
        """One class per line; the line number is the class index.

        Lines of the form ``<index> <name>`` are also accepted, provided the
        indices run 0, 1, 2, ... in order.
        """
        names = []
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            head, _, rest = line.partition(" ")
            if rest and head.isdigit():
                if int(head) != len(names):
                    raise ValidationError(f"{path}: class indices must be contiguous from 0")
                line = rest.strip()
            names.append(line)
        return cls(tuple(names))


def _check(label_map: np.ndarray, n_classes: int) -> np.ndarray:
    m = np.asarray(label_map)
    if m.ndim != 2:
        raise ValidationError("label maps must be 2-D")
    if m.size and (m.min() < 0 or m.max() >= n_classes):
        bad = m[(m < 0) | (m >= n_classes)].flat[0]
        raise ValidationError(f"label map contains unknown class index {bad}")
    return m


def image_class_presence(label_maps: Sequence[np.ndarray], n_classes: int) -> np.ndarray:
    """Fraction of maps in which each class appears at least once."""
    if not len(label_maps):
        raise ValidationError("no label maps")
    hits = np.zeros(n_classes, dtype=np.int64)
    for m in label_maps:
        present = np.zeros(n_classes, dtype=bool)
        present[np.unique(_check(m, n_classes))] = True
        hits += present
    return hits / len(label_maps)


def pixel_class_share(label_maps: Sequence[np.ndarray], n_classes: int) -> np.ndarray:
    """Fraction of all pixels belonging to each class."""
    if not len(label_maps):
        raise ValidationError("no label maps")
    counts = np.zeros(n_classes, dtype=np.int64)
    for m in label_maps:
        counts += np.bincount(_check(m, n_classes).ravel(), minlength=n_classes)
    return counts / counts.sum()


def gaze_pixel(gaze: GazePoint) -> tuple[int, int]:
    """(column, row) of the pixel nearest the gaze point; halves round away from zero."""
    def rnd(v):
        return int(math.copysign(math.floor(abs(v) + 0.5), v))
    return rnd(gaze.x), rnd(gaze.y)


@dataclass(frozen=True)
class FixationDistribution:
    shares: np.ndarray
    counts: np.ndarray
    skipped: int


def fixation_class_distribution(label_maps: Sequence[np.ndarray], gazes: Sequence[GazePoint],
                                n_classes: int) -> FixationDistribution:
    """Class of the pixel under each fixation, as normalized counts.

    Gazes outside their map are skipped and counted.  A rounded index that
    lands one past the last row/column of an in-frame gaze is clamped.
    """
    if len(label_maps) != len(gazes):
        raise ValidationError("need one gaze per label map")
    counts = np.zeros(n_classes, dtype=np.int64)
    skipped = 0
    for m, g in zip(label_maps, gazes):
        m = _check(m, n_classes)
        h, w = m.shape
        if g is None or not g.in_frame(w, h):
            skipped += 1
            continue
        col, row = gaze_pixel(g)
        counts[m[min(row, h - 1), min(col, w - 1)]] += 1
    total = counts.sum()
    shares = counts / total if total else np.zeros(n_classes)
    return FixationDistribution(shares, counts, skipped)
