"""Two-module gaze network: a calibration embedder and a spatially weighted regressor."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import (CALIB_CHANNELS, IMAGE_CHANNELS, INPUT_CHANNELS, BoundingBox, GazePoint, Sample,
                   calibration_input, image_channels, resize_chw)
from .errors import ValidationError

NORM_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 224
    backbone_width: int = 64
    backbone_depth: int = 4
    blocks_per_stage: int = 2
    head_hidden: int = 4096
    dropout_rate: float = 0.5
    embedding_dim: int = 8
    output_size: tuple[int, int] = (1280, 720)
    imagenet_stem: bool = True

    def __post_init__(self):
        for name in ("input_side", "backbone_width", "backbone_depth", "blocks_per_stage",
                     "head_hidden", "embedding_dim"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if not 0 <= self.dropout_rate < 1:
            raise ValidationError("dropout_rate must lie in [0, 1)")
        if self.embedding_dim != CALIB_CHANNELS:
            raise ValidationError(f"embedding_dim must be {CALIB_CHANNELS}")

    @classmethod
    def reference(cls, output_size=(1280, 720)) -> "ModelConfig":
        """ResNet-18-sized configuration."""
        return cls(output_size=tuple(output_size))

    @classmethod
    def desk(cls, output_size=(64, 64)) -> "ModelConfig":
        """Narrow, shallow preset that trains on one CPU core in minutes."""
        return cls(input_side=32, backbone_width=16, backbone_depth=3, blocks_per_stage=1,
                   head_hidden=256, dropout_rate=0.5, output_size=tuple(output_size),
                   imagenet_stem=False)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "output_size" in d:
            d["output_size"] = tuple(d["output_size"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["output_size"] = list(self.output_size)
        return d


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.shortcut is None else self.shortcut(x)))


class ResidualBackbone(nn.Module):
    """ResNet-style trunk; stage k has width * 2**k channels and halves the resolution."""

    def __init__(self, in_channels, width, stages, blocks_per_stage, imagenet_stem):
        super().__init__()
        if imagenet_stem:
            self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 7, 2, 3, bias=False),
                                      nn.BatchNorm2d(width), nn.ReLU(inplace=True),
                                      nn.MaxPool2d(3, 2, 1))
        else:
            self.stem = nn.Sequential(nn.Conv2d(in_channels, width, 3, 1, 1, bias=False),
                                      nn.BatchNorm2d(width), nn.ReLU(inplace=True))
        layers, c = [], width
        for k in range(stages):
            out = width * 2 ** k
            for b in range(blocks_per_stage):
                layers.append(BasicBlock(c, out, 2 if (k > 0 and b == 0) else 1))
                c = out
        self.layers = nn.Sequential(*layers)
        self.out_channels = c

    def forward(self, x):
        return self.layers(self.stem(x))


def _feature_side(cfg: ModelConfig, stages: int) -> int:
    side = cfg.input_side
    if cfg.imagenet_stem:
        side = (side + 1) // 2
        side = (side + 1) // 2
    for _ in range(stages - 1):
        side = (side + 1) // 2
    return side


class CalibrationModule(nn.Module):
    """Scene + face (6 channels) -> unit-norm 8-vector.

    The trunk carries one residual stage more than the regression trunk,
    followed by global average pooling.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.backbone = ResidualBackbone(6, cfg.backbone_width, cfg.backbone_depth + 1,
                                         cfg.blocks_per_stage, cfg.imagenet_stem)
        self.fc = nn.Linear(self.backbone.out_channels, cfg.embedding_dim)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 6:
            raise ValidationError(f"calibration input must be B x 6 x H x W, got {tuple(x.shape)}")
        v = self.fc(self.backbone(x).mean(dim=(2, 3)))
        return v / (v.norm(dim=1, keepdim=True) + NORM_EPS)


class RegressionModule(nn.Module):
    """20-channel stack -> gaze point in scene pixels."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = ResidualBackbone(INPUT_CHANNELS, cfg.backbone_width, cfg.backbone_depth,
                                         cfg.blocks_per_stage, cfg.imagenet_stem)
        c = self.backbone.out_channels
        self.weighting = nn.Sequential(nn.Conv2d(c, c, 1), nn.ReLU(inplace=True),
                                       nn.Conv2d(c, c, 1), nn.ReLU(inplace=True),
                                       nn.Conv2d(c, c, 1))
        self.dropout = nn.Dropout(cfg.dropout_rate)
        side = _feature_side(cfg, cfg.backbone_depth)
        self.head = nn.Sequential(
            nn.Linear(c * side * side, cfg.head_hidden), nn.ReLU(inplace=True),
            nn.Linear(cfg.head_hidden, cfg.head_hidden), nn.ReLU(inplace=True),
            nn.Linear(cfg.head_hidden, 2))
        self.register_buffer("scale", torch.tensor(cfg.output_size, dtype=torch.float32))
        # test hook: replace the learned weighting map by ones
        self.unit_weighting = False

    def features(self, x):
        if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS:
            raise ValidationError(
                f"regression input must be B x {INPUT_CHANNELS} x H x W, got {tuple(x.shape)}")
        f = self.backbone(x)
        w = torch.ones_like(f) if self.unit_weighting else self.weighting(f)
        return F.relu(f * w)

    def head_output(self, h):
        return torch.sigmoid(self.head(self.dropout(h).flatten(1))) * self.scale

    def forward(self, x):
        return self.head_output(self.features(x))


class DPEN(nn.Module):
    """Calibration module + regression module, trained jointly.

    ``use_scene=False`` zeroes the scene channels of the regression input
    (the calibration module still sees the scene).  ``zero_calibration`` is
    a probe that blanks the eight calibration channels.
    """

    def __init__(self, cfg: ModelConfig, use_scene: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_scene = use_scene
        self.calibration = CalibrationModule(cfg)
        self.regression = RegressionModule(cfg)
        self.zero_calibration = False

    def regression_input(self, images, embedding):
        if images.shape[1] != IMAGE_CHANNELS:
            raise ValidationError(f"expected {IMAGE_CHANNELS} image channels")
        if not self.use_scene:
            images = torch.cat([torch.zeros_like(images[:, :3]), images[:, 3:]], dim=1)
        calib = embedding[:, :, None, None].expand(-1, -1, *images.shape[2:])
        if self.zero_calibration:
            calib = torch.zeros_like(calib)
        return torch.cat([images, calib], dim=1)

    def forward(self, calib_input, images):
        embedding = self.calibration(calib_input)
        point = self.regression(self.regression_input(images, embedding))
        return point, embedding


@dataclass(frozen=True)
class GazePrediction:
    point: GazePoint
    embedding: np.ndarray


def _set_mode(module: nn.Module, mode: str) -> None:
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    module.train(mode == "train")


def _as_chw(image: np.ndarray, side: int) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 image, got shape {image.shape}")
    return resize_chw(image, side)


def calibration_forward(scene: np.ndarray, face: np.ndarray, model: DPEN,
                        mode: str = "eval") -> np.ndarray:
    side = model.cfg.input_side
    x = np.concatenate([_as_chw(scene, side), _as_chw(face, side)], axis=0)
    _set_mode(model, mode)
    with torch.no_grad():
        return model.calibration(torch.from_numpy(x)[None])[0].numpy()


def regression_forward(input20: np.ndarray, model: DPEN, mode: str = "eval") -> GazePoint:
    x = torch.as_tensor(np.asarray(input20, dtype=np.float32))
    if x.ndim == 3:
        x = x[None]
    _set_mode(model, mode)
    with torch.no_grad():
        p = model.regression(x)[0].double().numpy()
    return GazePoint(float(p[0]), float(p[1]))


def dpen_forward(sample: Sample, facial_roi: BoundingBox, model: DPEN,
                 mode: str = "eval") -> GazePrediction:
    side = model.cfg.input_side
    calib = torch.from_numpy(calibration_input(sample, side))[None]
    images = torch.from_numpy(image_channels(sample, facial_roi, side))[None]
    _set_mode(model, mode)
    with torch.no_grad():
        point, emb = model(calib, images)
    p = point[0].double().numpy()
    return GazePrediction(GazePoint(float(p[0]), float(p[1])), emb[0].numpy())


def build_model(cfg: ModelConfig, use_scene: bool = True, seed: Optional[int] = None) -> DPEN:
    if seed is not None:
        torch.manual_seed(seed)
    return DPEN(cfg, use_scene=use_scene)
