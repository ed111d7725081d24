"""Fidelity metrics for predicted vs. ground-truth multislice images."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import Dataset, IntensityImage

# fold/test-set scores average per-image values; pixels are never pooled across images
AGGREGATION = "per-image mean"


class DimensionMismatchError(ValueError):
    pass


class ConstantTargetError(ValueError):
    """The ground-truth image has zero spread, so fractional RMSE is undefined."""


class UnknownPairError(KeyError):
    pass


def _check_same_shape(a: IntensityImage, b: IntensityImage) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def fractional_rmse_pct(predicted: IntensityImage, actual: IntensityImage) -> float:
    """100 * RMSE(predicted, actual) / population std of ``actual``."""
    _check_same_shape(predicted, actual)
    a = actual.values
    mean = a.mean()
    sigma = np.sqrt(np.mean((a - mean) ** 2))
    if sigma == 0:
        raise ConstantTargetError("fractional RMSE is undefined for a constant ground-truth image")
    rmse = np.sqrt(np.mean((predicted.values - a) ** 2))
    return float(100.0 * (rmse / sigma))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable weighted mean over every window fully inside ``x``."""
    w = g.size
    x = sliding_window_view(x, w, axis=0) @ g
    return sliding_window_view(x, w, axis=1) @ g


def ssim(
    a: IntensityImage,
    b: IntensityImage,
    window: int = 11,
    gaussian_sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float | None = None,
) -> float:
    """Mean SSIM over all Gaussian-weighted windows that fit inside the image.

    ``data_range`` defaults to the images' intensity ceiling.
    """
    _check_same_shape(a, b)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    if window > min(a.shape):
        raise DimensionMismatchError(f"window {window} exceeds image size {a.shape}")
    if data_range is None:
        data_range = a.intensity_ceiling
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    g = gaussian_window(window, gaussian_sigma)
    x, y = a.values, b.values

    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    # each statistic is formed the same way for x and y so that ssim(a, a) == 1 exactly
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class PairMetrics:
    pair_id: str
    frac_rmse_pct: float
    ssim: float


@dataclass(frozen=True)
class MetricsReport:
    per_pair: tuple[PairMetrics, ...]
    mean_frac_rmse_pct: float
    mean_ssim: float
    metadata: dict = field(default_factory=lambda: {"aggregation": AGGREGATION})

    @classmethod
    def from_pairs(cls, per_pair: Iterable[PairMetrics]) -> "MetricsReport":
        per_pair = tuple(per_pair)
        if not per_pair:
            raise ValueError("a metrics report needs at least one pair")
        return cls(
            per_pair,
            math.fsum(m.frac_rmse_pct for m in per_pair) / len(per_pair),
            math.fsum(m.ssim for m in per_pair) / len(per_pair),
        )

    def to_json(self) -> dict:
        return {
            "per_pair": [asdict(m) for m in self.per_pair],
            "mean_frac_rmse_pct": self.mean_frac_rmse_pct,
            "mean_ssim": self.mean_ssim,
            "metadata": dict(self.metadata),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MetricsReport":
        return cls(
            tuple(PairMetrics(**m) for m in doc["per_pair"]),
            doc["mean_frac_rmse_pct"],
            doc["mean_ssim"],
            doc.get("metadata", {"aggregation": AGGREGATION}),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pair_id", "frac_rmse_pct", "ssim"])
        for m in self.per_pair:
            writer.writerow([m.pair_id, repr(m.frac_rmse_pct), repr(m.ssim)])
        writer.writerow(["mean", repr(self.mean_frac_rmse_pct), repr(self.mean_ssim)])
        return buf.getvalue()

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="") as fh:
            fh.write(self.to_csv())
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)


def evaluate_pairs(predictions, actuals: Dataset) -> MetricsReport:
    """Score ``(pair_id, image)`` predictions against each pair's multislice image."""
    per_pair = []
    for pair_id, image in predictions:
        if pair_id not in actuals:
            raise UnknownPairError(pair_id)
        target = actuals[pair_id].multi
        per_pair.append(
            PairMetrics(pair_id, fractional_rmse_pct(image, target), ssim(image, target))
        )
    return MetricsReport.from_pairs(per_pair)


def mean_frac_rmse_pct(predictions, actuals: Dataset) -> float:
    """Mean per-image fractional RMSE; skips SSIM for speed inside training loops."""
    scores = [fractional_rmse_pct(img, actuals[pid].multi) for pid, img in predictions]
    return math.fsum(scores) / len(scores)
