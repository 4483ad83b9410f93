"""Desk-scale synthetic world with known per-session camera geometry.

Each session draws a SessionCameraConfig that fixes how a gaze direction
g in [-1, 1]^2 maps to a scene pixel (rotation, scale, offset) and how the
driver's face sits in the face camera.  The face image shows the eyes with
pupils displaced by the gaze direction; the scene image shows colored disks,
one of which sits exactly at the gaze point and is drawn from the same
color/size distribution as the distractors.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (SYNTHETIC_LANDMARKS, BoundingBox, DatasetManifest, GazePoint, SampleRecord,
                   SessionRecord, save_manifest, split_sessions, write_image, write_label_map)
from .errors import GeometryError, ValidationError

SCENE_CLASSES = ("sky", "road", "car", "person", "traffic_sign", "rider")
DISK_CLASSES = (2, 3, 4, 5)
DISK_COLORS = {
    2: (0.85, 0.15, 0.15),
    3: (0.95, 0.85, 0.20),
    4: (0.15, 0.30, 0.90),
    5: (0.20, 0.75, 0.30),
}
SKY = (0.62, 0.78, 0.92)
ROAD = (0.40, 0.40, 0.42)
CABIN = (0.18, 0.18, 0.22)
SKIN = (0.87, 0.70, 0.58)
SCLERA = (0.97, 0.97, 0.97)
PUPIL = (0.08, 0.06, 0.05)

# Face geometry as fractions of the image side / face radius.
FACE_RADIUS = 0.25
FACE_ASPECT = 1.25
EYE_SPACING = 0.42
EYE_HEIGHT = -0.12
EYE_HALF_WIDTH = 0.30
DISK_RADIUS = (0.045, 0.07)


@dataclass(frozen=True)
class SessionCameraConfig:
    rotation_deg: float
    scale: float
    offset: tuple[float, float]
    eye_gain: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"scale must be positive, got {self.scale}")
        if abs(self.rotation_deg) > 45:
            raise ValidationError(f"|rotation_deg| must be <= 45, got {self.rotation_deg}")
        if not self.eye_gain > 0:
            raise ValidationError(f"eye_gain must be positive, got {self.eye_gain}")

    def linear_map(self, image_side: int) -> np.ndarray:
        t = math.radians(self.rotation_deg)
        rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
        return image_side * self.scale * rot

    def translation(self, image_side: int) -> np.ndarray:
        return np.array([image_side / 2 + self.offset[0], image_side / 2 + self.offset[1]])

    def check_in_frame(self, image_side: int) -> None:
        corners = np.array([[-1, -1], [-1, 1], [1, -1], [1, 1]], dtype=float)
        mapped = corners @ self.linear_map(image_side).T + self.translation(image_side)
        if mapped.min() < 0 or mapped.max() >= image_side:
            raise GeometryError(f"{self} maps part of the gaze range outside a "
                                f"{image_side}px scene image")

    def to_dict(self) -> dict:
        return {"rotation_deg": self.rotation_deg, "scale": self.scale,
                "offset": list(self.offset), "eye_gain": self.eye_gain}

    @classmethod
    def from_dict(cls, d: dict) -> "SessionCameraConfig":
        return cls(float(d["rotation_deg"]), float(d["scale"]),
                   tuple(map(float, d["offset"])), float(d["eye_gain"]))


@dataclass(frozen=True)
class WorldConfig:
    image_side: int = 64
    n_sessions: int = 6
    samples_per_session: int = 500
    n_distractors: int = 4
    noise_sigma: float = 0.02
    rng_seed: int = 0
    sessions_per_subject: int = 3
    rotation_range_deg: float = 15.0
    scale_range: tuple[float, float] = (0.22, 0.32)
    offset_range: float = 0.08
    eye_gain_range: tuple[float, float] = (0.45, 0.6)
    face_coupling: float = 0.5
    head_jitter: float = 0.5
    cabin_marker: bool = False

    def __post_init__(self):
        for name in ("n_sessions", "samples_per_session", "n_distractors", "sessions_per_subject"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.image_side < 32:
            raise ValidationError("image_side must be >= 32")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValidationError(f"bad scale_range {self.scale_range}")
        lo, hi = self.eye_gain_range
        if not 0 < lo <= hi <= 1:
            raise ValidationError(f"eye_gain_range must lie in (0, 1], got {self.eye_gain_range}")
        if not 0 <= self.rotation_range_deg <= 45:
            raise ValidationError("rotation_range_deg must lie in [0, 45]")
        t = math.radians(self.rotation_range_deg)
        reach = self.scale_range[1] * (math.cos(t) + math.sin(t)) + self.offset_range
        if reach >= 0.5:
            raise GeometryError(f"configuration ranges can map gaze outside the frame "
                                f"(worst-case reach {reach:.3f} of the image side >= 0.5)")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown world config keys: {sorted(unknown)}")
        d = dict(d)
        for k in ("scale_range", "eye_gain_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def oracle_gaze(g, config: SessionCameraConfig, image_side: int) -> GazePoint:
    """Scene point for gaze direction g under a session's geometry."""
    g = np.asarray(g, dtype=np.float64)
    p = config.linear_map(image_side) @ g + config.translation(image_side)
    return GazePoint(float(p[0]), float(p[1]))


def session_rng(seed: int, session_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(session_id.encode())])


def draw_session_config(world: WorldConfig, rng: np.random.Generator) -> SessionCameraConfig:
    side = world.image_side
    cfg = SessionCameraConfig(
        rotation_deg=float(rng.uniform(-world.rotation_range_deg, world.rotation_range_deg)),
        scale=float(rng.uniform(*world.scale_range)),
        offset=tuple(float(v) for v in rng.uniform(-1, 1, size=2) * world.offset_range * side),
        eye_gain=float(rng.uniform(*world.eye_gain_range)),
    )
    cfg.check_in_frame(side)
    return cfg


# ---------------------------------------------------------------- rendering

def _grid(side: int):
    c = np.arange(side, dtype=np.float64) + 0.5
    return np.meshgrid(c, c)


def _ellipse_alpha(xx, yy, center, rx, ry, angle_deg=0.0):
    t = math.radians(angle_deg)
    dx, dy = xx - center[0], yy - center[1]
    u = math.cos(t) * dx + math.sin(t) * dy
    v = -math.sin(t) * dx + math.cos(t) * dy
    d = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
    return np.clip((1.0 - d) * min(rx, ry) + 0.5, 0.0, 1.0)


def _paint(img, alpha, color):
    img *= 1.0 - alpha[..., None]
    img += alpha[..., None] * np.asarray(color)


@dataclass
class FaceLayout:
    center: np.ndarray
    radius: float
    roll_deg: float

    def rotate(self, v):
        t = math.radians(self.roll_deg)
        return np.array([math.cos(t) * v[0] - math.sin(t) * v[1],
                         math.sin(t) * v[0] + math.cos(t) * v[1]])

    def eye_centers(self):
        dy = EYE_HEIGHT * self.radius * FACE_ASPECT
        return [self.center + self.rotate((s * EYE_SPACING * self.radius, dy)) for s in (-1, 1)]

    @property
    def eye_half_width(self) -> float:
        return EYE_HALF_WIDTH * self.radius

    def box(self) -> BoundingBox:
        rx, ry = self.radius, self.radius * FACE_ASPECT
        t = math.radians(self.roll_deg)
        hx = math.hypot(rx * math.cos(t), ry * math.sin(t))
        hy = math.hypot(rx * math.sin(t), ry * math.cos(t))
        cx, cy = self.center
        return BoundingBox(cx - hx, cy - hy, cx + hx, cy + hy)


def face_layout(config: SessionCameraConfig, world: WorldConfig, jitter) -> FaceLayout:
    side = world.image_side
    mid_scale = sum(world.scale_range) / 2
    center = (np.array([side / 2, side / 2]) + world.face_coupling * np.asarray(config.offset)
              + np.asarray(jitter))
    return FaceLayout(center, FACE_RADIUS * side * config.scale / mid_scale, config.rotation_deg)


def render_face(layout: FaceLayout, g, eye_gain: float, side: int):
    """Face image plus landmarks: eye corners (outer/inner per eye) then pupil centers."""
    xx, yy = _grid(side)
    img = np.empty((side, side, 3))
    img[:] = CABIN
    _paint(img, _ellipse_alpha(xx, yy, layout.center, layout.radius,
                               layout.radius * FACE_ASPECT, layout.roll_deg), SKIN)
    hw = layout.eye_half_width
    corner = layout.rotate((hw, 0.0))
    shift = eye_gain * hw * np.asarray(g, dtype=np.float64)
    corners, pupils = [], []
    for eye in layout.eye_centers():
        _paint(img, _ellipse_alpha(xx, yy, eye, hw, 0.55 * hw, layout.roll_deg), SCLERA)
        pupil = eye + shift
        _paint(img, _ellipse_alpha(xx, yy, pupil, 0.38 * hw, 0.38 * hw), PUPIL)
        corners += [eye - corner, eye + corner]
        pupils.append(pupil)
    landmarks = tuple((float(p[0]), float(p[1])) for p in corners + pupils)
    return img, landmarks


def paint_cabin_marker(img, config: SessionCameraConfig, world: WorldConfig) -> None:
    """Bars along the top and left border whose positions track the session offset."""
    side = world.image_side
    xx, yy = _grid(side)
    reach = max(world.offset_range * side, 1e-9)
    mx = side / 2 + 0.35 * side * config.offset[0] / reach
    my = side / 2 + 0.35 * side * config.offset[1] / reach
    band = 0.09 * side
    alpha = np.clip(1.5 - np.abs(xx - mx), 0, 1) * (yy < band)
    _paint(img, alpha, SCLERA)
    alpha = np.clip(1.5 - np.abs(yy - my), 0, 1) * (xx < band)
    _paint(img, alpha, SCLERA)


def render_scene(target, rng: np.random.Generator, world: WorldConfig):
    """Scene image, label map and car boxes; the target disk is one of n_distractors + 1."""
    side = world.image_side
    xx, yy = _grid(side)
    img = np.empty((side, side, 3))
    labels = np.empty((side, side), dtype=np.int64)
    horizon = side * 0.45
    img[yy < horizon] = SKY
    img[yy >= horizon] = ROAD
    labels[yy < horizon] = SCENE_CLASSES.index("sky")
    labels[yy >= horizon] = SCENE_CLASSES.index("road")

    n = world.n_distractors + 1
    classes = rng.choice(DISK_CLASSES, size=n)
    radii = rng.uniform(*DISK_RADIUS, size=n) * side
    centers = rng.uniform(0, side, size=(n, 2))
    centers[int(rng.integers(n))] = target
    boxes = []
    for cls, r, c in zip(classes, radii, centers):
        alpha = _ellipse_alpha(xx, yy, c, r, r)
        _paint(img, alpha, DISK_COLORS[int(cls)])
        labels[alpha >= 0.5] = int(cls)
        if SCENE_CLASSES[int(cls)] == "car":
            boxes.append(BoundingBox(c[0] - r, c[1] - r, c[0] + r, c[1] + r, label="car"))
    return img, labels, tuple(boxes)


def _noisy(img, rng, sigma):
    if sigma > 0:
        img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_session(world: WorldConfig, session_id: str, subject_id: str, out_dir: Path,
                     config: Optional[SessionCameraConfig] = None):
    rng = session_rng(world.rng_seed, session_id)
    drawn = draw_session_config(world, rng)
    config = config or drawn
    config.check_in_frame(world.image_side)
    side = world.image_side
    sdir = out_dir / "images" / session_id
    sdir.mkdir(parents=True, exist_ok=True)

    records, latents = [], []
    for i in range(world.samples_per_session):
        g = rng.uniform(-1.0, 1.0, size=2)
        jitter = rng.uniform(-world.head_jitter, world.head_jitter, size=2)
        p = oracle_gaze(g, config, side)
        layout = face_layout(config, world, jitter)
        face, landmarks = render_face(layout, g, config.eye_gain, side)
        if world.cabin_marker:
            paint_cabin_marker(face, config, world)
        scene, labels, boxes = render_scene((p.x, p.y), rng, world)
        face = _noisy(face, rng, world.noise_sigma)
        scene = _noisy(scene, rng, world.noise_sigma)

        stem = f"{i:05d}"
        write_image(sdir / f"{stem}_scene.png", scene)
        write_image(sdir / f"{stem}_face.png", face)
        write_label_map(sdir / f"{stem}_labels.png", labels)
        rel = f"images/{session_id}/{stem}"
        records.append(SampleRecord(
            scene=f"{rel}_scene.png", face=f"{rel}_face.png", landmarks=landmarks,
            gaze=(p.x, p.y), boxes=boxes, label_map=f"{rel}_labels.png", face_box=layout.box()))
        latents.append({"g": [float(g[0]), float(g[1])],
                        "jitter": [float(jitter[0]), float(jitter[1])]})
    session = SessionRecord(session_id, subject_id, tuple(records))
    return session, {"session_id": session_id, "image_side": side,
                     "config": config.to_dict(), "samples": latents}


def session_ids(world: WorldConfig) -> list[tuple[str, str]]:
    return [(f"s{i:02d}", f"d{i // world.sessions_per_subject:02d}")
            for i in range(world.n_sessions)]


def generate_dataset(world: WorldConfig, out_dir,
                     configs: Optional[Sequence[SessionCameraConfig]] = None) -> DatasetManifest:
    """Render every session, write images, latents and manifest.json under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "latents").mkdir(exist_ok=True)
    if configs is not None and len(configs) != world.n_sessions:
        raise ValidationError("need one SessionCameraConfig per session")
    sessions = []
    for k, (sid, subj) in enumerate(session_ids(world)):
        session, latents = generate_session(world, sid, subj, out_dir,
                                            configs[k] if configs is not None else None)
        sessions.append(session)
        (out_dir / "latents" / f"{sid}.json").write_text(json.dumps(latents, indent=1) + "\n")
    (out_dir / "classes.txt").write_text("\n".join(SCENE_CLASSES) + "\n")
    manifest = DatasetManifest(sessions=tuple(sessions), landmark_index=SYNTHETIC_LANDMARKS,
                               classes="classes.txt", root=out_dir)
    manifest = split_sessions(manifest, world.rng_seed)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def load_latents(out_dir, session_id: str) -> dict:
    d = json.loads((Path(out_dir) / "latents" / f"{session_id}.json").read_text())
    d["config"] = SessionCameraConfig.from_dict(d["config"])
    return d
