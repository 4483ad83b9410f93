"""Optimization loop, session-stratified batching, checkpoints."""

from __future__ import annotations

import copy
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import (BoundingBox, DatasetManifest, calibration_input, image_channels, iter_samples,
                   manifest_facial_roi)
from .errors import DegenerateBatchWarning, TrainingError, ValidationError
from .losses import LossConfig, loss_terms, sample_triplets
from .model import DPEN, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "drivergaze-checkpoint"
CHECKPOINT_VERSION = 1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    rng_seed: int = 0
    checkpoint_every: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    use_triplet: bool = True
    use_scene: bool = True

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.batch_size < 4:
            raise ValidationError("batch_size must be >= 4")
        if self.epochs < 1 or self.checkpoint_every < 1:
            raise ValidationError("epochs and checkpoint_every must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossConfig.from_dict(d["loss"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.to_dict()
        d["model"] = self.model.to_dict()
        return d


@dataclass
class GazeTensors:
    """Network-ready arrays for every gaze-annotated sample of a set of sessions."""

    calib: torch.Tensor
    images: torch.Tensor
    gaze: torch.Tensor
    sessions: np.ndarray
    subjects: np.ndarray
    facial_roi: BoundingBox

    def __len__(self):
        return self.gaze.shape[0]

    def subset(self, mask) -> "GazeTensors":
        idx = torch.as_tensor(np.flatnonzero(mask))
        return GazeTensors(self.calib[idx], self.images[idx], self.gaze[idx],
                           self.sessions[idx.numpy()], self.subjects[idx.numpy()], self.facial_roi)

    def of_sessions(self, session_ids) -> "GazeTensors":
        return self.subset(np.isin(self.sessions, list(session_ids)))


def build_tensors(manifest: DatasetManifest, side: int, split: Optional[str] = None,
                  facial_roi: Optional[BoundingBox] = None) -> GazeTensors:
    roi = facial_roi or manifest_facial_roi(manifest)
    calib, images, gaze, sessions, subjects = [], [], [], [], []
    for sample in iter_samples(manifest, split=split, require_gaze=True):
        calib.append(calibration_input(sample, side))
        images.append(image_channels(sample, roi, side))
        gaze.append((sample.gaze.x, sample.gaze.y))
        sessions.append(sample.session_id)
        subjects.append(sample.subject_id)
    if not gaze:
        raise ValidationError(f"no gaze-annotated samples (split={split!r})")
    return GazeTensors(torch.from_numpy(np.stack(calib)), torch.from_numpy(np.stack(images)),
                       torch.tensor(gaze, dtype=torch.float32), np.array(sessions),
                       np.array(subjects), roi)


def _swap_in(batches, b, sessions) -> bool:
    """Swap one foreign sample into homogeneous batch b without unmixing the donor."""
    s = sessions[batches[b][0]]
    for c in range(len(batches)):
        if c == b:
            continue
        donors = [k for k, j in enumerate(batches[c]) if sessions[j] != s]
        rest = sessions[np.delete(batches[c], donors[0])] if donors else []
        if donors and len(np.unique(np.append(rest, s))) > 1:
            k = donors[0]
            batches[b][-1], batches[c][k] = batches[c][k], batches[b][-1]
            return True
    return False


def session_batches(sessions: np.ndarray, batch_size: int,
                    rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled batches, each holding >= 2 sessions whenever the data does."""
    n = len(sessions)
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < max(4, batch_size // 4):
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    if len(np.unique(sessions)) < 2:
        return batches
    b = 0
    while b < len(batches):
        if len(np.unique(sessions[batches[b]])) > 1 or _swap_in(batches, b, sessions):
            b += 1
            continue
        # too few other-session samples to go round: fold this batch into a mixed one
        s = sessions[batches[b][0]]
        c = next(c for c in range(len(batches)) if c != b and (sessions[batches[c]] != s).any())
        batches[c] = np.concatenate([batches[c], batches[b]])
        batches.pop(b)
    return batches


@dataclass
class TrainResult:
    model: DPEN
    checkpoint: Path
    last_checkpoint: Path
    metrics: list
    best_epoch: int
    train_sessions: list


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 1_000_003 + epoch) % (2 ** 63)


def save_checkpoint(path: Path, model: DPEN, optimizer, cfg: TrainConfig, epoch: int,
                    metrics: list, facial_roi: BoundingBox, train_sessions: list,
                    best_epoch: int, state_dict=None) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": cfg.model.to_dict(),
        "train_config": cfg.to_dict(),
        "use_scene": model.use_scene,
        "facial_roi": list(facial_roi.as_tuple()),
        "train_sessions": list(train_sessions),
        "state_dict": state_dict if state_dict is not None else model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "adam": {"betas": list(ADAM_BETAS), "eps": ADAM_EPS},
        "epoch": epoch,
        "best_epoch": best_epoch,
        "metrics": metrics,
        "rng": {"torch": torch.get_rng_state(), "numpy_seed": [cfg.rng_seed, epoch]},
    }, path)


def read_checkpoint(path) -> dict:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT or "version" not in ckpt:
        raise ValidationError(f"{path} is not a drivergaze checkpoint")
    if ckpt["version"] > CHECKPOINT_VERSION:
        raise ValidationError(f"checkpoint version {ckpt['version']} is newer than supported")
    return ckpt


def load_model(path) -> tuple[DPEN, dict]:
    ckpt = read_checkpoint(path)
    model = DPEN(ModelConfig.from_dict(ckpt["model_config"]), use_scene=ckpt["use_scene"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt


def train(manifest: DatasetManifest, cfg: TrainConfig, out_dir,
          data: Optional[GazeTensors] = None, resume: Optional[Path] = None,
          exclude_sessions=()) -> TrainResult:
    """Train on the manifest's train split (minus ``exclude_sessions``).

    Writes metrics.jsonl, last.pt and best.pt under out_dir.  The model
    returned and best.pt carry the parameters of the epoch with the lowest
    training pixel error.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_sessions = sorted(s.session_id for s in manifest.sessions_in("train")
                            if s.session_id not in set(exclude_sessions))
    if len(train_sessions) < 2:
        raise TrainingError(f"training split needs >= 2 sessions, got {train_sessions}")
    if data is None:
        data = build_tensors(manifest, cfg.model.input_side, split="train")
    data = data.of_sessions(train_sessions)
    if len(np.unique(data.sessions)) < 2:
        raise TrainingError("training data covers fewer than 2 sessions")

    torch.manual_seed(cfg.rng_seed)
    model = DPEN(cfg.model, use_scene=cfg.use_scene)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS,
                                 eps=ADAM_EPS)
    metrics, start, best_epoch, best_state = [], 1, 0, None
    if resume is not None:
        ckpt = read_checkpoint(resume)
        model.load_state_dict(ckpt["state_dict"])
        optimizer.load_state_dict(ckpt["optimizer"])
        metrics = list(ckpt["metrics"])
        start = ckpt["epoch"] + 1
        best_epoch = ckpt["best_epoch"]
        best_file = Path(resume).parent / "best.pt"
        best = read_checkpoint(best_file) if best_file.exists() else None
        best_state = best["state_dict"] if best and best["best_epoch"] == best_epoch else None

    last_path, best_path = out_dir / "last.pt", out_dir / "best.pt"
    for epoch in range(start, cfg.epochs + 1):
        record = _run_epoch(model, optimizer, data, cfg, epoch)
        metrics.append(record)
        log.info("epoch %d %s", epoch, record)
        if best_epoch == 0 or record["pixel_error"] < metrics[best_epoch - 1]["pixel_error"]:
            best_epoch, best_state = epoch, copy.deepcopy(model.state_dict())
        if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
            save_checkpoint(last_path, model, optimizer, cfg, epoch, metrics, data.facial_roi,
                            train_sessions, best_epoch)
            save_checkpoint(best_path, model, None, cfg, best_epoch, metrics[:best_epoch],
                            data.facial_roi, train_sessions, best_epoch, state_dict=best_state)
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for m in metrics:
            fh.write(json.dumps(m) + "\n")
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, best_path, last_path, metrics, best_epoch, train_sessions)


def _run_epoch(model: DPEN, optimizer, data: GazeTensors, cfg: TrainConfig, epoch: int) -> dict:
    rng = np.random.default_rng([cfg.rng_seed, epoch])
    torch.manual_seed(_epoch_seed(cfg.rng_seed, epoch))
    model.train()
    n_seen, dist_sum, trip_sum, err_sum, degenerate = 0, 0.0, 0.0, 0.0, 0
    for batch in session_batches(data.sessions, cfg.batch_size, rng):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DegenerateBatchWarning)
            triplets = sample_triplets(data.sessions[batch], rng)
        degenerate += len(caught)
        idx = torch.as_tensor(batch)
        pred, emb = model(data.calib[idx], data.images[idx])
        gt = data.gaze[idx]
        if not (torch.isfinite(pred).all() and torch.isfinite(emb).all()):
            raise TrainingError(f"non-finite network output at epoch {epoch} "
                                f"(batch of {len(batch)}, sessions {sorted(set(data.sessions[batch]))})")
        dist, trip = loss_terms(pred, emb, gt, triplets.triplets, cfg.loss)
        loss = dist + trip if cfg.use_triplet else dist
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at epoch {epoch}: dist={dist.item()}, "
                                f"trip={trip.item()}, pred range "
                                f"[{pred.min().item()}, {pred.max().item()}]")
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        k = len(batch)
        n_seen += k
        dist_sum += dist.item() * k
        trip_sum += trip.item() * k
        err_sum += (pred.detach() - gt).norm(dim=1).sum().item()
    if degenerate:
        log.warning("epoch %d: %d batches without any triplet", epoch, degenerate)
    return {"epoch": epoch, "loss_dist": dist_sum / n_seen, "loss_trip": trip_sum / n_seen,
            "pixel_error": err_sum / n_seen}


@torch.no_grad()
def predict(model: DPEN, data: GazeTensors, batch_size: int = 256):
    """Eval-mode (points, embeddings) as float64 numpy arrays."""
    model.eval()
    points, embs = [], []
    for i in range(0, len(data), batch_size):
        p, e = model(data.calib[i:i + batch_size], data.images[i:i + batch_size])
        points.append(p.double().numpy())
        embs.append(e.double().numpy())
    return np.concatenate(points), np.concatenate(embs)
