"""File-only figures: epoch-error curves and conv | predicted | multi triptychs."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .experiments import RunRecord  # noqa: E402
from .imaging import IntensityImage  # noqa: E402
from .metrics import ssim  # noqa: E402


def run_label(record: RunRecord) -> str:
    settings = record.config.get("settings") or {}
    if "batch_size" in settings:
        return f"{record.run_id} (batch size {settings['batch_size']})"
    return record.run_id


def mean_curve(record: RunRecord) -> tuple[np.ndarray, np.ndarray]:
    """Epoch axis and per-epoch error averaged over the run's folds."""
    curves = [c for c in record.curves if len(c)]
    if not curves:
        raise ValueError(f"run {record.run_id} has no epoch curves")
    n = min(len(c) for c in curves)
    errors = np.mean([c.errors[:n] for c in curves], axis=0)
    return np.arange(1, n + 1), errors


def plot_curves(records: Sequence[RunRecord], out_path) -> list[str]:
    """One line per run; returns the legend labels in plotting order."""
    if not records:
        raise ValueError("no runs to plot")
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = []
    for record in records:
        epochs, errors = mean_curve(record)
        label = run_label(record)
        ax.plot(epochs, errors, label=label)
        labels.append(label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("eval fractional RMSE (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(out_path))
    plt.close(fig)
    return labels


def plot_triptychs(
    rows: Sequence[tuple[str, IntensityImage, IntensityImage, IntensityImage]], out_path
) -> list[str]:
    """Render ``(pair_id, conv, predicted, multi)`` rows; returns the SSIM annotations."""
    if not rows:
        raise ValueError("no pairs to plot")
    fig, axes = plt.subplots(len(rows), 3, figsize=(9, 3 * len(rows)), squeeze=False)
    notes = []
    for (pair_id, conv, pred, multi), ax_row in zip(rows, axes):
        note = f"SSIM={ssim(pred, multi):.3f}"
        notes.append(note)
        vmax = max(conv.values.max(), pred.values.max(), multi.values.max()) or 1.0
        for ax, img, title in zip(ax_row, (conv, pred, multi), ("convolution", "predicted", "multislice")):
            ax.imshow(img.values, cmap="gray", vmin=0.0, vmax=vmax)
            ax.set_title(f"{pair_id}: {title}", fontsize=8)
            ax.axis("off")
        ax_row[1].text(
            0.02, 0.02, note, transform=ax_row[1].transAxes, color="yellow", fontsize=9, va="bottom"
        )
    fig.tight_layout()
    fig.savefig(Path(out_path))
    plt.close(fig)
    return notes
