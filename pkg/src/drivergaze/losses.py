"""Weighted distance loss, session triplet loss and in-batch triplet sampling."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Hashable, Sequence

import numpy as np
import torch

from .errors import DegenerateBatchWarning, ValidationError

UNIT_NORM_TOL = 1e-4


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.1
    beta: float = 2.0
    tau: float = 5.0
    mu: float = 0.2

    def __post_init__(self):
        if not 0 < self.alpha < self.beta:
            raise ValidationError("need 0 < alpha < beta")
        if not self.tau > 0 or not self.mu > 0:
            raise ValidationError("tau and mu must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def safe_norm(v: torch.Tensor) -> torch.Tensor:
    """Euclidean norm over the last axis whose gradient at 0 is 0 instead of NaN."""
    sq = (v * v).sum(-1)
    nonzero = sq > 0
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def weighted_distance_loss(pred, gt, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """beta * relu(d - tau) - alpha * relu(tau - d) with d = |gt - pred|, per sample.

    At d == tau the lower (alpha) branch supplies the subgradient.
    """
    pred, gt = _as_tensor(pred), _as_tensor(gt)
    if not (torch.isfinite(pred).all() and torch.isfinite(gt).all()):
        raise ValidationError("non-finite gaze point in distance loss")
    d = safe_norm(gt - pred)
    excess = d - cfg.tau
    return torch.where(excess > 0, cfg.beta * excess, cfg.alpha * excess)


def _check_unit(x: torch.Tensor, name: str) -> None:
    n = x.detach().norm(dim=-1)
    if n.numel() and (n - 1).abs().max() > UNIT_NORM_TOL:
        raise ValidationError(f"{name} embedding is not unit norm (|v| = {n.flatten()[0]:.6f})")


def triplet_loss(anchor, pos, neg, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """relu(|a - p| - |a - n| + mu) for unit-norm embeddings."""
    anchor, pos, neg = _as_tensor(anchor), _as_tensor(pos), _as_tensor(neg)
    for x, name in ((anchor, "anchor"), (pos, "positive"), (neg, "negative")):
        _check_unit(x, name)
    return torch.relu(safe_norm(anchor - pos) - safe_norm(anchor - neg) + cfg.mu)


@dataclass(frozen=True)
class TripletBatch:
    triplets: tuple[tuple[int, int, int], ...]
    skipped: tuple[int, ...]

    @property
    def skipped_fraction(self) -> float:
        n = len(self.triplets) + len(self.skipped)
        return len(self.skipped) / n if n else 1.0


def sample_triplets(sessions: Sequence[Hashable], rng: np.random.Generator) -> TripletBatch:
    """For each batch position pick a same-session positive and an other-session negative.

    Anchors without a partner of either kind are skipped; a batch where every
    anchor is skipped triggers a DegenerateBatchWarning.
    """
    sessions = list(sessions)
    triplets, skipped = [], []
    for i, s in enumerate(sessions):
        same = [j for j, t in enumerate(sessions) if t == s and j != i]
        other = [j for j, t in enumerate(sessions) if t != s]
        if not same or not other:
            skipped.append(i)
            continue
        p = same[int(rng.integers(len(same)))]
        n = other[int(rng.integers(len(other)))]
        triplets.append((i, p, n))
    if sessions and not triplets:
        warnings.warn(f"no triplet could be formed in a batch of {len(sessions)} samples",
                      DegenerateBatchWarning, stacklevel=2)
    return TripletBatch(tuple(triplets), tuple(skipped))


def loss_terms(preds, embeddings, gts, triplets, cfg: LossConfig = LossConfig()):
    """(mean distance term, mean triplet term); both averaged over all n samples."""
    preds, embeddings, gts = _as_tensor(preds), _as_tensor(embeddings), _as_tensor(gts)
    n = preds.shape[0]
    if gts.shape[0] != n or embeddings.shape[0] != n:
        raise ValidationError(f"length mismatch: {n} predictions, {gts.shape[0]} targets, "
                              f"{embeddings.shape[0]} embeddings")
    if n == 0:
        raise ValidationError("empty batch")
    dist = weighted_distance_loss(preds, gts, cfg).sum() / n
    if len(triplets):
        idx = torch.as_tensor(np.asarray(triplets, dtype=np.int64).reshape(-1, 3))
        if idx.max() >= n or idx.min() < 0:
            raise ValidationError("triplet index outside the batch")
        trip = triplet_loss(embeddings[idx[:, 0]], embeddings[idx[:, 1]],
                            embeddings[idx[:, 2]], cfg).sum() / n
    else:
        trip = dist.new_zeros(())
    return dist, trip


def total_loss(preds, embeddings, gts, triplets, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    dist, trip = loss_terms(preds, embeddings, gts, triplets, cfg)
    return dist + trip
