"""Reference predictors: identity pass-through and neighbourhood polynomial regression.

The polynomial model maps the ``w x w`` neighbourhood of each convolution pixel
(unit-rescaled, reflect-padded at the borders) to the multislice intensity with a
full multivariate polynomial of total degree ``<= d``. ``w = 1`` is the plain
one-to-one pixel polynomial.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .imaging import Dataset, IntensityImage

DEFAULT_WINDOW = 3
DEFAULT_DEGREE = 2
DEFAULT_SAMPLES_PER_IMAGE = 2000


class UnderdeterminedFitError(ValueError):
    pass


class EmptyDatasetError(ValueError):
    pass


def n_terms(window: int, degree: int) -> int:
    return math.comb(window * window + degree, degree)


@lru_cache(maxsize=32)
def _term_indices(window: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """Monomials as sorted tuples of variable indices, in graded-lexicographic order."""
    m = window * window
    terms: list[tuple[int, ...]] = [()]
    for d in range(1, degree + 1):
        terms.extend(combinations_with_replacement(range(m), d))
    return tuple(terms)


def term_exponents(window: int, degree: int) -> list[tuple[int, ...]]:
    """Exponent vectors over the ``window**2`` neighbourhood variables (row-major)."""
    m = window * window
    out = []
    for idx in _term_indices(window, degree):
        e = [0] * m
        for i in idx:
            e[i] += 1
        out.append(tuple(e))
    return out


def _check_window(window: int, degree: int) -> None:
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")
    if degree < 1:
        raise ValueError(f"degree must be >= 1, got {degree}")


def _neighbourhoods(image: IntensityImage, window: int) -> np.ndarray:
    """Stack of shifted unit-scale images, shape (window**2, H, W), row-major offsets."""
    unit = image.values / image.intensity_ceiling
    r = window // 2
    padded = np.pad(unit, r, mode="reflect") if r else unit
    h, w = unit.shape
    return np.stack(
        [padded[dy : dy + h, dx : dx + w] for dy in range(window) for dx in range(window)]
    )


def _expand(neigh: np.ndarray, window: int, degree: int) -> np.ndarray:
    """Monomial expansion of neighbourhood vectors; ``neigh`` is (m, ...) -> (n_terms, ...)."""
    terms = _term_indices(window, degree)
    out = np.empty((len(terms),) + neigh.shape[1:], dtype=np.float64)
    # each monomial extends its prefix by one factor, so reuse the prefix product
    cache: dict[tuple[int, ...], np.ndarray] = {(): np.ones(neigh.shape[1:])}
    for t, idx in enumerate(terms):
        if idx not in cache:
            cache[idx] = cache[idx[:-1]] * neigh[idx[-1]]
        out[t] = cache[idx]
    return out


def extract_features(image: IntensityImage, p: tuple[int, int], window: int, degree: int) -> np.ndarray:
    """Feature vector for the pixel at ``p = (row, col)``; the first entry is the constant 1."""
    _check_window(window, degree)
    row, col = p
    neigh = _neighbourhoods(image, window)[:, row, col]
    return _expand(neigh, window, degree)


def feature_maps(image: IntensityImage, window: int, degree: int) -> np.ndarray:
    """Features for every pixel at once, shape (n_terms, H, W)."""
    _check_window(window, degree)
    return _expand(_neighbourhoods(image, window), window, degree)


@dataclass(frozen=True)
class PolyModel:
    window: int
    degree: int
    term_exponents: tuple[tuple[int, ...], ...]
    coefficients: np.ndarray
    intensity_ceiling: float
    train_residual_rms: float | None = None

    def __post_init__(self):
        _check_window(self.window, self.degree)
        coeffs = np.asarray(self.coefficients, dtype=np.float64).copy()
        exps = tuple(tuple(int(x) for x in e) for e in self.term_exponents)
        expected = n_terms(self.window, self.degree)
        if len(exps) != expected or coeffs.shape != (expected,):
            raise ValueError(
                f"window {self.window}, degree {self.degree} needs {expected} terms, "
                f"got {len(exps)} exponents and {coeffs.shape} coefficients"
            )
        if list(exps) != term_exponents(self.window, self.degree):
            raise ValueError("term_exponents must be the graded-lexicographic monomial list")
        coeffs.setflags(write=False)
        object.__setattr__(self, "coefficients", coeffs)
        object.__setattr__(self, "term_exponents", exps)

    @classmethod
    def from_coefficients(cls, window, degree, coefficients, intensity_ceiling=0.01):
        return cls(window, degree, tuple(term_exponents(window, degree)), coefficients, intensity_ceiling)

    def to_json(self) -> dict:
        doc = {
            "window": self.window,
            "degree": self.degree,
            "term_exponents": [list(e) for e in self.term_exponents],
            "coefficients": self.coefficients.tolist(),
            "intensity_ceiling": self.intensity_ceiling,
        }
        if self.train_residual_rms is not None:
            doc["train_residual_rms"] = self.train_residual_rms
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "PolyModel":
        return cls(
            window=int(doc["window"]),
            degree=int(doc["degree"]),
            term_exponents=tuple(tuple(e) for e in doc["term_exponents"]),
            coefficients=np.asarray(doc["coefficients"], dtype=np.float64),
            intensity_ceiling=float(doc["intensity_ceiling"]),
            train_residual_rms=doc.get("train_residual_rms"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PolyModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def sample_positions(shape: tuple[int, int], samples: int, seed: int, image_index: int) -> np.ndarray:
    """Flat pixel indices drawn without replacement; capped at the pixel count."""
    n_pix = shape[0] * shape[1]
    rng = np.random.default_rng([seed & 0xFFFFFFFF, image_index])
    return np.sort(rng.choice(n_pix, size=min(samples, n_pix), replace=False))


def fit_poly(
    train: Dataset,
    window: int = DEFAULT_WINDOW,
    degree: int = DEFAULT_DEGREE,
    samples_per_image: int = DEFAULT_SAMPLES_PER_IMAGE,
    seed: int = 0,
) -> PolyModel:
    """Least-squares fit of multislice (unit scale) on neighbourhood monomials of conv.

    Uses an SVD-based solver, so rank-deficient designs (e.g. constant images) get the
    minimum-norm coefficient vector instead of an error.
    """
    _check_window(window, degree)
    if len(train) == 0:
        raise EmptyDatasetError("cannot fit a polynomial on an empty dataset")
    k = n_terms(window, degree)
    if samples_per_image < k:
        raise UnderdeterminedFitError(
            f"samples_per_image={samples_per_image} is below the {k} polynomial terms"
        )
    rows, targets = [], []
    for i, pair in enumerate(train):
        feats = feature_maps(pair.conv, window, degree).reshape(k, -1)
        pos = sample_positions(pair.conv.shape, samples_per_image, seed, i)
        rows.append(feats[:, pos].T)
        targets.append((pair.multi.values / pair.multi.intensity_ceiling).ravel()[pos])
    a = np.concatenate(rows)
    b = np.concatenate(targets)
    beta, *_ = np.linalg.lstsq(a, b, rcond=None)
    residual = float(np.sqrt(np.mean((a @ beta - b) ** 2)))
    return PolyModel(
        window,
        degree,
        tuple(term_exponents(window, degree)),
        beta,
        train[0].conv.intensity_ceiling,
        residual,
    )


def evaluate_polynomial(model: PolyModel, conv: IntensityImage) -> np.ndarray:
    """Raw (unclamped) polynomial value per pixel, unit scale."""
    feats = feature_maps(conv, model.window, model.degree)
    return np.tensordot(model.coefficients, feats, axes=1)


def predict_poly(model: PolyModel, conv: IntensityImage) -> IntensityImage:
    unit = np.clip(evaluate_polynomial(model, conv), 0.0, 1.0)
    return IntensityImage(unit * model.intensity_ceiling, model.intensity_ceiling)


def identity_baseline(conv: IntensityImage) -> IntensityImage:
    return conv
