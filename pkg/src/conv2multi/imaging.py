"""Intensity images, paired datasets and PNG I/O.

Pixel values are electron-intensity fractions in ``[0, intensity_ceiling]``
(``0.01`` by default). On disk they are stored as linear full-scale grayscale
PNG codes: ``code / code_max * intensity_ceiling``.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

I_MAX = 0.01

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_CODE_MAX = {8: 255, 16: 65535}


class ImageFormatError(ValueError):
    """Base class for PNG files this package refuses to read."""


class ImageNotFoundError(FileNotFoundError):
    pass


class MultiChannelImageError(ImageFormatError):
    pass


class UnsupportedBitDepthError(ImageFormatError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class IntensityImage:
    """A 2-D grid of intensity fractions, stored as a read-only float64 array (rows, cols)."""

    values: np.ndarray
    intensity_ceiling: float = I_MAX

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
            raise ValueError(f"expected a non-empty 2-D array, got shape {arr.shape}")
        if not self.intensity_ceiling > 0:
            raise ValueError("intensity_ceiling must be positive")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > self.intensity_ceiling:
            raise ValueError(
                f"values must lie in [0, {self.intensity_ceiling}], got [{lo}, {hi}]"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "intensity_ceiling", float(self.intensity_ceiling))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, IntensityImage):
            return NotImplemented
        return self.intensity_ceiling == other.intensity_ceiling and np.array_equal(
            self.values, other.values
        )

    def __repr__(self):
        return (
            f"IntensityImage({self.width}x{self.height}, "
            f"ceiling={self.intensity_ceiling:g})"
        )


@dataclass(frozen=True)
class ImagePair:
    id: str
    conv: IntensityImage
    multi: IntensityImage

    def __post_init__(self):
        if self.conv.shape != self.multi.shape:
            raise ValueError(
                f"pair {self.id!r}: conv {self.conv.shape} and multi {self.multi.shape} differ"
            )
        if self.conv.intensity_ceiling != self.multi.intensity_ceiling:
            raise ValueError(f"pair {self.id!r}: intensity ceilings differ")


@dataclass(frozen=True)
class Dataset:
    pairs: tuple[ImagePair, ...]
    image_size: int
    provenance: str = "synthetic"
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pairs = tuple(self.pairs)
        object.__setattr__(self, "pairs", pairs)
        index = {}
        for i, pair in enumerate(pairs):
            if pair.conv.shape != (self.image_size, self.image_size):
                raise DatasetError(
                    f"pair {pair.id!r} has shape {pair.conv.shape}, "
                    f"expected {self.image_size}x{self.image_size}"
                )
            if pair.id in index:
                raise DatasetError(f"duplicate pair id {pair.id!r}")
            index[pair.id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.pairs)

    def __iter__(self) -> Iterator[ImagePair]:
        return iter(self.pairs)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.pairs[self._index[key]]
        return self.pairs[key]

    def __contains__(self, pair_id):
        return pair_id in self._index

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(tuple(self.pairs[i] for i in indices), self.image_size, self.provenance)


def _png_header(path: Path) -> tuple[int, int, int, int]:
    """Return (width, height, bit_depth, color_type) from the IHDR chunk."""
    with open(path, "rb") as fh:
        head = fh.read(29)
    if len(head) < 29 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise ImageFormatError(f"{path}: not a PNG file")
    width, height, bit_depth, color_type = struct.unpack(">IIBB", head[16:26])
    return width, height, bit_depth, color_type


def load_png(path, intensity_ceiling: float = I_MAX) -> IntensityImage:
    """Read a single-channel 8- or 16-bit grayscale PNG as intensities."""
    path = Path(path)
    if not path.is_file():
        raise ImageNotFoundError(f"no such image: {path}")
    width, height, bit_depth, color_type = _png_header(path)
    # color type 0 is the only single-channel grayscale type
    if color_type != 0:
        raise MultiChannelImageError(f"{path}: PNG color type {color_type} is not grayscale")
    if bit_depth not in _CODE_MAX:
        raise UnsupportedBitDepthError(f"{path}: unsupported bit depth {bit_depth}")
    with Image.open(path) as im:
        codes = np.asarray(im)
    if codes.shape != (height, width):
        raise ImageFormatError(f"{path}: decoded shape {codes.shape} disagrees with header")
    values = codes.astype(np.float64) / _CODE_MAX[bit_depth] * intensity_ceiling
    # guards the last ulp of full-scale codes
    values = np.minimum(values, intensity_ceiling)
    return IntensityImage(values, intensity_ceiling)


def to_codes(image: IntensityImage) -> np.ndarray:
    """16-bit codes that :func:`save_png` would write."""
    return np.rint(image.values / image.intensity_ceiling * 65535).astype(np.uint16)


def save_png(image: IntensityImage, path) -> None:
    path = Path(path)
    Image.fromarray(to_codes(image)).save(path, format="PNG")


def read_codes(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im).copy()


def normalize_for_model(image: IntensityImage) -> np.ndarray:
    return 2.0 * (image.values / image.intensity_ceiling) - 1.0


def denormalize_from_model(grid, intensity_ceiling: float = I_MAX) -> IntensityImage:
    unit = np.clip((np.asarray(grid, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return IntensityImage(unit * intensity_ceiling, intensity_ceiling)


def image_stats(image: IntensityImage) -> tuple[float, float]:
    """Mean and population standard deviation of the pixel intensities."""
    v = image.values
    mean = v.mean()
    std = np.sqrt(np.mean((v - mean) ** 2))
    return float(mean), float(std)


def save_dataset(dataset: Dataset, root) -> None:
    """Write ``conv/<id>.png`` and ``multi/<id>.png`` under ``root``."""
    root = Path(root)
    (root / "conv").mkdir(parents=True, exist_ok=True)
    (root / "multi").mkdir(parents=True, exist_ok=True)
    for pair in dataset:
        save_png(pair.conv, root / "conv" / f"{pair.id}.png")
        save_png(pair.multi, root / "multi" / f"{pair.id}.png")


def load_dataset(root, intensity_ceiling: float = I_MAX, provenance: str = "external") -> Dataset:
    """Load a paired dataset directory; ids are matched by filename stem and sorted."""
    root = Path(root)
    conv_dir, multi_dir = root / "conv", root / "multi"
    if not conv_dir.is_dir() or not multi_dir.is_dir():
        raise DatasetError(f"{root}: expected conv/ and multi/ subdirectories")
    conv_ids = {p.stem for p in conv_dir.glob("*.png")}
    multi_ids = {p.stem for p in multi_dir.glob("*.png")}
    if conv_ids != multi_ids:
        missing = sorted(conv_ids ^ multi_ids)
        raise DatasetError(f"{root}: unpaired images: {', '.join(missing[:5])}")
    if not conv_ids:
        raise DatasetError(f"{root}: no images found")
    manifest = root / "synth-config.json"
    if manifest.exists():
        provenance = "synthetic"
    pairs = []
    for pid in sorted(conv_ids, key=_natural_key):
        conv = load_png(conv_dir / f"{pid}.png", intensity_ceiling)
        multi = load_png(multi_dir / f"{pid}.png", intensity_ceiling)
        pairs.append(ImagePair(pid, conv, multi))
    size = pairs[0].conv.height
    if any(p.conv.shape != (size, size) for p in pairs):
        raise DatasetError(f"{root}: images are not all {size}x{size}")
    return Dataset(tuple(pairs), size, provenance)


def _natural_key(s: str):
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", s)]
