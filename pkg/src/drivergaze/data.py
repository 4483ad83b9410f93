"""Data model, manifest I/O, ROI geometry and network input assembly."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import jsonschema
import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DegenerateLandmarksError, ManifestError, MissingFileError, ValidationError

EYE_ROI_SCALE = 1.5
IMAGE_CHANNELS = 12
CALIB_CHANNELS = 8
INPUT_CHANNELS = IMAGE_CHANNELS + CALIB_CHANNELS


@dataclass(frozen=True)
class GazePoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValidationError(f"non-finite gaze point ({self.x}, {self.y})")

    def in_frame(self, width: int, height: int) -> bool:
        return 0 <= self.x < width and 0 <= self.y < height

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    label: str = ""

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(f"empty bounding box {self.as_tuple()}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def contains(self, other: "BoundingBox") -> bool:
        return (self.x_min <= other.x_min and self.y_min <= other.y_min
                and self.x_max >= other.x_max and self.y_max >= other.y_max)


@dataclass(frozen=True)
class LandmarkIndex:
    """Positions of the eye corners (and optional pupils) in a landmark list."""

    left_eye: tuple[int, int] = (0, 1)
    right_eye: tuple[int, int] = (2, 3)
    left_pupil: Optional[int] = None
    right_pupil: Optional[int] = None

    def to_dict(self) -> dict:
        return {"left_eye": list(self.left_eye), "right_eye": list(self.right_eye),
                "left_pupil": self.left_pupil, "right_pupil": self.right_pupil}

    @classmethod
    def from_dict(cls, d: dict) -> "LandmarkIndex":
        return cls(tuple(d["left_eye"]), tuple(d["right_eye"]),
                   d.get("left_pupil"), d.get("right_pupil"))


SYNTHETIC_LANDMARKS = LandmarkIndex((0, 1), (2, 3), 4, 5)


@dataclass(frozen=True)
class Landmarks:
    points: tuple[tuple[float, float], ...]
    index: LandmarkIndex = LandmarkIndex()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or not np.all(np.isfinite(pts)):
            raise ValidationError("landmarks must be a list of finite (x, y) pairs")
        used = [*self.index.left_eye, *self.index.right_eye]
        used += [i for i in (self.index.left_pupil, self.index.right_pupil) if i is not None]
        for i in used:
            if not 0 <= i < len(pts):
                raise ValidationError(f"landmark index {i} out of range for {len(pts)} points")

    def point(self, i: int) -> np.ndarray:
        return np.asarray(self.points[i], dtype=np.float64)

    def eye_corners(self) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
        li, ri = self.index.left_eye, self.index.right_eye
        return ((self.point(li[0]), self.point(li[1])), (self.point(ri[0]), self.point(ri[1])))


@dataclass(frozen=True, eq=False)
class Sample:
    scene_image: np.ndarray
    face_image: np.ndarray
    landmarks: Optional[Landmarks]
    gaze: Optional[GazePoint]
    session_id: str
    subject_id: str
    object_boxes: tuple[BoundingBox, ...] = ()
    label_map: Optional[np.ndarray] = None
    face_box: Optional[BoundingBox] = None

    def __post_init__(self):
        for name in ("scene_image", "face_image"):
            img = getattr(self, name)
            if img.ndim != 3 or img.shape[2] != 3:
                raise ValidationError(f"{name} must be H x W x 3, got {img.shape}")
        if self.gaze is not None:
            h, w = self.scene_image.shape[:2]
            if not self.gaze.in_frame(w, h):
                raise ValidationError(f"gaze {self.gaze} outside {w}x{h} scene image")

    @property
    def scene_size(self) -> tuple[int, int]:
        h, w = self.scene_image.shape[:2]
        return (w, h)


@dataclass(frozen=True)
class SampleRecord:
    scene: str
    face: str
    landmarks: tuple[tuple[float, float], ...]
    gaze: Optional[tuple[float, float]] = None
    boxes: tuple[BoundingBox, ...] = ()
    label_map: Optional[str] = None
    face_box: Optional[BoundingBox] = None


@dataclass(frozen=True)
class SessionRecord:
    session_id: str
    subject_id: str
    samples: tuple[SampleRecord, ...]


@dataclass(frozen=True)
class DatasetManifest:
    sessions: tuple[SessionRecord, ...]
    split: dict = field(default_factory=dict)
    landmark_index: LandmarkIndex = LandmarkIndex()
    facial_roi: Optional[BoundingBox] = None
    classes: Optional[str] = None
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [s.session_id for s in self.sessions]
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        if dupes:
            raise ManifestError(f"duplicate session ids: {dupes}")
        unknown = sorted(set(self.split) - set(ids))
        if unknown:
            raise ManifestError(f"split names unknown sessions: {unknown}")
        bad = sorted(k for k, v in self.split.items() if v not in ("train", "test"))
        if bad:
            raise ManifestError(f"split values must be 'train' or 'test' (sessions {bad})")

    def session(self, session_id: str) -> SessionRecord:
        for s in self.sessions:
            if s.session_id == session_id:
                return s
        raise KeyError(session_id)

    def sessions_in(self, split: str) -> list[SessionRecord]:
        return [s for s in self.sessions if self.split.get(s.session_id) == split]

    def subjects(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for s in self.sessions:
            out[s.subject_id].append(s.session_id)
        return dict(out)

    def resolve(self, rel: str) -> Path:
        return self.root / rel

    def restrict(self, session_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(session_ids)
        sessions = tuple(s for s in self.sessions if s.session_id in keep)
        split = {k: v for k, v in self.split.items() if k in keep}
        return replace(self, sessions=sessions, split=split)


# ---------------------------------------------------------------- geometry

def compute_eye_roi(landmarks: Landmarks) -> tuple[BoundingBox, BoundingBox]:
    """Square eye windows centred on the corner midpoints, side 1.5x the corner distance."""
    boxes = []
    for a, b in landmarks.eye_corners():
        dist = float(np.hypot(*(b - a)))
        if dist <= 0:
            raise DegenerateLandmarksError(f"eye corners coincide at {tuple(a)}")
        cx, cy = (a + b) / 2
        half = EYE_ROI_SCALE * dist / 2
        boxes.append(BoundingBox(cx - half, cy - half, cx + half, cy + half))
    return boxes[0], boxes[1]


def compute_facial_roi(face_boxes: Sequence[BoundingBox]) -> BoundingBox:
    if not face_boxes:
        raise ValidationError("facial ROI needs at least one face box")
    return BoundingBox(min(b.x_min for b in face_boxes), min(b.y_min for b in face_boxes),
                       max(b.x_max for b in face_boxes), max(b.y_max for b in face_boxes))


def manifest_facial_roi(manifest: DatasetManifest) -> BoundingBox:
    """The pinned facial ROI if the manifest has one, else the union of all face boxes."""
    if manifest.facial_roi is not None:
        return manifest.facial_roi
    boxes = [r.face_box for s in manifest.sessions for r in s.samples if r.face_box is not None]
    if not boxes:
        raise ManifestError("manifest has neither a facial_roi nor per-sample face boxes")
    return compute_facial_roi(boxes)


def crop_with_padding(image: np.ndarray, box: BoundingBox) -> np.ndarray:
    """Crop an H x W x C image to the integer-snapped box; outside pixels are zero."""
    x0 = int(math.floor(box.x_min))
    y0 = int(math.floor(box.y_min))
    w = max(1, int(round(box.width)))
    h = max(1, int(round(box.height)))
    out = np.zeros((h, w, image.shape[2]), dtype=image.dtype)
    H, W = image.shape[:2]
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + w, W), min(y0 + h, H)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = image[sy0:sy1, sx0:sx1]
    return out


def resize_chw(image: np.ndarray, side: int) -> np.ndarray:
    """H x W x C -> C x side x side (bilinear, anisotropic)."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    if t.shape[-2:] != (side, side):
        t = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False,
                          antialias=True)
    return t[0].numpy()


def image_channels(sample: Sample, facial_roi: BoundingBox, side: int) -> np.ndarray:
    """The 12 image channels of the regression input: scene, face ROI, left eye, right eye."""
    if side <= 0:
        raise ValidationError(f"side must be positive, got {side}")
    if sample.landmarks is None:
        raise ValidationError("sample has no landmarks")
    left, right = compute_eye_roi(sample.landmarks)
    parts = [sample.scene_image,
             crop_with_padding(sample.face_image, facial_roi),
             crop_with_padding(sample.face_image, left),
             crop_with_padding(sample.face_image, right)]
    return np.concatenate([resize_chw(p, side) for p in parts], axis=0)


def calibration_input(sample: Sample, side: int) -> np.ndarray:
    """Scene and full face image stacked into a 6-channel array."""
    return np.concatenate([resize_chw(sample.scene_image, side),
                           resize_chw(sample.face_image, side)], axis=0)


def tile_calibration(calib, side: int) -> np.ndarray:
    v = np.asarray(calib, dtype=np.float32).reshape(-1)
    if v.shape[0] != CALIB_CHANNELS:
        raise ValidationError(f"calibration embedding must have {CALIB_CHANNELS} values")
    return np.broadcast_to(v[:, None, None], (CALIB_CHANNELS, side, side)).copy()


def assemble_input(sample: Sample, facial_roi: BoundingBox, calib, side: int) -> np.ndarray:
    """20 x side x side regression input: 12 image channels then 8 constant calibration maps."""
    return np.concatenate([image_channels(sample, facial_roi, side),
                           tile_calibration(calib, side)], axis=0)


# ---------------------------------------------------------------- splitting

def split_sessions(manifest: DatasetManifest, rng_seed: int) -> DatasetManifest:
    """Per subject: one session goes to train; otherwise exactly one random session is test."""
    rng = np.random.default_rng(rng_seed)
    split = {}
    for subject in sorted(manifest.subjects()):
        sessions = sorted(manifest.subjects()[subject])
        if len(sessions) == 1:
            split[sessions[0]] = "train"
            continue
        test = sessions[int(rng.integers(len(sessions)))]
        for s in sessions:
            split[s] = "test" if s == test else "train"
    return replace(manifest, split=split)


# ---------------------------------------------------------------- image I/O

def read_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_label_map(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)


def write_label_map(path: Path, labels: np.ndarray) -> None:
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------- manifest I/O

_BOX = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
_POINT = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["sessions"],
    "additionalProperties": False,
    "properties": {
        "sessions": {"type": "array", "items": {
            "type": "object",
            "required": ["session_id", "subject_id", "samples"],
            "additionalProperties": False,
            "properties": {
                "session_id": {"type": "string"},
                "subject_id": {"type": "string"},
                "samples": {"type": "array", "items": {
                    "type": "object",
                    "required": ["scene", "face", "landmarks"],
                    "additionalProperties": False,
                    "properties": {
                        "scene": {"type": "string"},
                        "face": {"type": "string"},
                        "landmarks": {"type": "array", "items": _POINT},
                        "gaze": {"oneOf": [_POINT, {"type": "null"}]},
                        "boxes": {"type": "array", "items": {
                            "type": "object", "required": ["label", "box"],
                            "additionalProperties": False,
                            "properties": {"label": {"type": "string"}, "box": _BOX}}},
                        "label_map": {"type": ["string", "null"]},
                        "face_box": {"oneOf": [_BOX, {"type": "null"}]},
                    }}},
            }}},
        "split": {"type": "object", "additionalProperties": {"enum": ["train", "test"]}},
        "landmark_index": {"type": "object"},
        "facial_roi": {"oneOf": [_BOX, {"type": "null"}]},
        "classes": {"type": ["string", "null"]},
    },
}


def _box_from(values, label="") -> BoundingBox:
    return BoundingBox(*map(float, values), label=label)


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    def sample_dict(r: SampleRecord) -> dict:
        return {
            "scene": r.scene,
            "face": r.face,
            "landmarks": [list(p) for p in r.landmarks],
            "gaze": list(r.gaze) if r.gaze is not None else None,
            "boxes": [{"label": b.label, "box": list(b.as_tuple())} for b in r.boxes],
            "label_map": r.label_map,
            "face_box": list(r.face_box.as_tuple()) if r.face_box is not None else None,
        }

    return {
        "sessions": [{"session_id": s.session_id, "subject_id": s.subject_id,
                      "samples": [sample_dict(r) for r in s.samples]} for s in manifest.sessions],
        "split": dict(sorted(manifest.split.items())),
        "landmark_index": manifest.landmark_index.to_dict(),
        "facial_roi": list(manifest.facial_roi.as_tuple()) if manifest.facial_roi else None,
        "classes": manifest.classes,
    }


def manifest_from_dict(d: dict, root: Path = Path("."), check_files: bool = True) -> DatasetManifest:
    try:
        jsonschema.validate(d, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ManifestError(f"manifest schema violation at {where}: {exc.message}") from None

    sessions = []
    for s in d["sessions"]:
        records = []
        for r in s["samples"]:
            records.append(SampleRecord(
                scene=r["scene"],
                face=r["face"],
                landmarks=tuple(tuple(map(float, p)) for p in r["landmarks"]),
                gaze=tuple(map(float, r["gaze"])) if r.get("gaze") is not None else None,
                boxes=tuple(_box_from(b["box"], b["label"]) for b in r.get("boxes", [])),
                label_map=r.get("label_map"),
                face_box=_box_from(r["face_box"]) if r.get("face_box") is not None else None,
            ))
        sessions.append(SessionRecord(s["session_id"], s["subject_id"], tuple(records)))

    manifest = DatasetManifest(
        sessions=tuple(sessions),
        split=dict(d.get("split", {})),
        landmark_index=LandmarkIndex.from_dict(d["landmark_index"]) if d.get("landmark_index")
        else LandmarkIndex(),
        facial_roi=_box_from(d["facial_roi"]) if d.get("facial_roi") is not None else None,
        classes=d.get("classes"),
        root=root,
    )
    if check_files:
        _check_files(manifest)
    return manifest


def _check_files(manifest: DatasetManifest) -> None:
    paths = [manifest.classes] if manifest.classes else []
    for s in manifest.sessions:
        for r in s.samples:
            paths += [r.scene, r.face] + ([r.label_map] if r.label_map else [])
    for p in paths:
        if not manifest.resolve(p).is_file():
            raise MissingFileError(manifest.resolve(p))


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON ({exc})") from None
    return manifest_from_dict(d, root=path.parent, check_files=check_files)


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=1) + "\n")


def load_sample(manifest: DatasetManifest, session: SessionRecord, record: SampleRecord) -> Sample:
    label_map = read_label_map(manifest.resolve(record.label_map)) if record.label_map else None
    return Sample(
        scene_image=read_image(manifest.resolve(record.scene)),
        face_image=read_image(manifest.resolve(record.face)),
        landmarks=Landmarks(record.landmarks, manifest.landmark_index),
        gaze=GazePoint(*record.gaze) if record.gaze is not None else None,
        session_id=session.session_id,
        subject_id=session.subject_id,
        object_boxes=record.boxes,
        label_map=label_map,
        face_box=record.face_box,
    )


def iter_samples(manifest: DatasetManifest, split: Optional[str] = None,
                 require_gaze: bool = False):
    for s in manifest.sessions:
        if split is not None and manifest.split.get(s.session_id) != split:
            continue
        for r in s.samples:
            if require_gaze and r.gaze is None:
                continue
            yield load_sample(manifest, s, r)
