"""Deterministic synthetic (convolution, multislice) image pairs.

Each pair renders one latent "structure": a sum of Gaussian blobs. The
convolution image sees it through a wide probe, the multislice image through a
narrow probe followed by a saturating response ``x / (1 + beta * x)`` and
additive noise. Randomness comes from a Philox counter-based generator keyed by
``(seed, index)``, so any pair can be regenerated on its own.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import baselines
from .imaging import I_MAX, Dataset, ImagePair, IntensityImage, save_dataset

MANIFEST_NAME = "synth-config.json"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    image_size: int = 64
    n_blobs: int = 12
    blob_sigma: float = 1.5
    probe_sigma_conv: float = 3.0
    probe_sigma_multi: float = 1.2
    saturation_beta: float = 2.0
    noise_sigma: float = 0.01
    intensity_ceiling: float = I_MAX

    def __post_init__(self):
        size = self.image_size
        if size < 16 or size & (size - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {size}")
        if self.n_blobs < 0:
            raise ValueError("n_blobs must be >= 0")
        if self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be positive")
        if not self.probe_sigma_conv > self.probe_sigma_multi > 0:
            raise ValueError("need probe_sigma_conv > probe_sigma_multi > 0")
        if self.saturation_beta < 0 or self.noise_sigma < 0:
            raise ValueError("saturation_beta and noise_sigma must be >= 0")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SynthConfig":
        return cls(**doc)


def _rng(seed: int, index: int) -> np.random.Generator:
    key = (int(seed) & 0xFFFFFFFFFFFFFFFF) << 64 | (int(index) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def _draw_structure(config: SynthConfig, index: int):
    rng = _rng(config.seed, index)
    centers = rng.uniform(0.0, config.image_size, size=(config.n_blobs, 2))
    amplitudes = rng.uniform(0.5, 1.0, size=config.n_blobs)
    return rng, centers, amplitudes


def _render(config: SynthConfig, centers, amplitudes, probe_sigma: float) -> np.ndarray:
    """Latent blobs convolved with a unit-mass Gaussian probe, evaluated in closed form.

    A Gaussian of width s blurred by a normalised Gaussian of width p is a Gaussian
    of width sqrt(s^2 + p^2) with its peak scaled by s^2 / (s^2 + p^2).
    """
    n = config.image_size
    s2 = config.blob_sigma**2
    var = s2 + probe_sigma**2
    coords = np.arange(n) + 0.5
    out = np.zeros((n, n))
    for (cy, cx), amp in zip(centers, amplitudes):
        gy = np.exp(-((coords - cy) ** 2) / (2 * var))
        gx = np.exp(-((coords - cx) ** 2) / (2 * var))
        out += amp * (s2 / var) * np.outer(gy, gx)
    return out


def _render_conv(config: SynthConfig, index: int):
    rng, centers, amplitudes = _draw_structure(config, index)
    conv_raw = _render(config, centers, amplitudes, config.probe_sigma_conv)
    multi_raw = _render(config, centers, amplitudes, config.probe_sigma_multi)
    # one scale for both renderings, set by the sharper one, keeps them comparable
    scale = multi_raw.max()
    if scale > 0:
        conv_unit = np.clip(conv_raw / scale, 0.0, 1.0)
        multi_unit = multi_raw / scale
    else:
        conv_unit = np.zeros_like(conv_raw)
        multi_unit = np.zeros_like(multi_raw)
    return rng, conv_unit, multi_unit


def generate_pair(config: SynthConfig, index: int) -> ImagePair:
    rng, conv_unit, x = _render_conv(config, index)
    multi = x / (1.0 + config.saturation_beta * x)
    if config.n_blobs > 0 and config.noise_sigma > 0:
        multi = multi + rng.normal(0.0, config.noise_sigma, size=multi.shape)
    multi = np.clip(multi, 0.0, 1.0)
    c = config.intensity_ceiling
    return ImagePair(
        f"synth-{index}",
        IntensityImage(conv_unit * c, c),
        IntensityImage(multi * c, c),
    )


def generate_dataset(config: SynthConfig, n_pairs: int) -> Dataset:
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    pairs = tuple(generate_pair(config, i) for i in range(n_pairs))
    return Dataset(pairs, config.image_size, "synthetic")


def generate_poly_pair(
    config: SynthConfig, index: int, window: int, degree: int, coefficients
) -> ImagePair:
    """Pair whose multislice image is exactly a known neighbourhood polynomial of conv."""
    coefficients = np.asarray(coefficients, dtype=np.float64)
    expected = baselines.n_terms(window, degree)
    if coefficients.shape != (expected,):
        raise ValueError(
            f"window {window}, degree {degree} needs {expected} coefficients, "
            f"got {coefficients.size}"
        )
    _, conv_unit, _ = _render_conv(config, index)
    c = config.intensity_ceiling
    conv = IntensityImage(conv_unit * c, c)
    model = baselines.PolyModel.from_coefficients(window, degree, coefficients, c)
    return ImagePair(f"poly-{index}", conv, baselines.predict_poly(model, conv))


def generate_poly_dataset(config: SynthConfig, n_pairs: int, window: int, degree: int, coefficients) -> Dataset:
    pairs = tuple(
        generate_poly_pair(config, i, window, degree, coefficients) for i in range(n_pairs)
    )
    return Dataset(pairs, config.image_size, "synthetic")


def write_dataset(dataset: Dataset, config: SynthConfig, root) -> None:
    root = Path(root)
    save_dataset(dataset, root)
    manifest = dict(config.to_json(), n_pairs=len(dataset))
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> tuple[SynthConfig, int]:
    doc = json.loads((Path(root) / MANIFEST_NAME).read_text())
    n = doc.pop("n_pairs")
    return SynthConfig.from_json(doc), n
