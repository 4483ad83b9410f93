"""Static PNG figures for reports."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_error_distribution(errors, out_dir, title: str = "") -> list[Path]:
    """Error density histogram and empirical CDF."""
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    out_dir = Path(out_dir)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist(errors, bins=40, density=True, color="tab:blue")
    ax.axvline(errors.mean(), color="k", ls="--", label=f"mean {errors.mean():.2f}")
    ax.axvline(np.median(errors), color="tab:red", ls=":", label=f"median {np.median(errors):.2f}")
    ax.set_xlabel("error (px)")
    ax.set_ylabel("density")
    ax.set_title(title)
    ax.legend()
    pdf = _save(fig, out_dir / "error_pdf.png")

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(errors, np.arange(1, len(errors) + 1) / len(errors), color="tab:blue")
    ax.set_xlabel("error (px)")
    ax.set_ylabel("cumulative probability")
    ax.set_ylim(0, 1.01)
    ax.set_title(title)
    cdf = _save(fig, out_dir / "error_cdf.png")
    return [pdf, cdf]


def plot_class_bars(names: Sequence[str], series: dict, path, ylabel: str = "percent") -> Path:
    """Grouped bars, one group per class and one bar per named series (values in [0, 1])."""
    x = np.arange(len(names))
    width = 0.8 / max(len(series), 1)
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(names)), 3))
    for k, (label, values) in enumerate(series.items()):
        ax.bar(x + k * width - 0.4 + width / 2, 100 * np.asarray(values), width, label=label)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=45, ha="right")
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    return _save(fig, Path(path))


def plot_training_curves(metrics: Sequence[dict], path) -> Path:
    epochs = [m["epoch"] for m in metrics]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    axes[0].plot(epochs, [m["pixel_error"] for m in metrics])
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("train pixel error")
    axes[1].plot(epochs, [m["loss_dist"] for m in metrics], label="distance")
    axes[1].plot(epochs, [m["loss_trip"] for m in metrics], label="triplet")
    axes[1].set_xlabel("epoch")
    axes[1].legend()
    return _save(fig, Path(path))


def plot_loso(rows: Sequence[dict], path) -> Path:
    """Per-subject mean error: leave-one-subject-out model next to the full model."""
    names = [r["subject"] for r in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 0.8 * len(names)), 3))
    ax.bar(x - 0.2, [r["loso_mean"] for r in rows], 0.4, label="leave-one-out")
    if all(r.get("full_mean") is not None for r in rows):
        ax.bar(x + 0.2, [r["full_mean"] for r in rows], 0.4, label="full")
    ax.set_xticks(x)
    ax.set_xticklabels(names)
    ax.set_ylabel("mean error (px)")
    ax.legend()
    return _save(fig, Path(path))
