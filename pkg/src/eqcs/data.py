"""Image datasets: IDX files and synthetic oriented shapes."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .groups import CyclicGroup, rotate_quarter

SPLITS = ("train", "val", "test")
_IDX_TYPES = {0x08: np.dtype(np.uint8)}


class DataError(ValueError):
    pass


class IdxFormatError(DataError):
    pass


@dataclass
class Dataset:
    """Images (N, h, w) in [0, 1] with optional split labels and provenance."""

    images: np.ndarray
    labels: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("dataset pixels must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise DataError("one split label per image is required")

    def __len__(self) -> int:
        return len(self.images)

    def part(self, name: str) -> np.ndarray:
        if name not in SPLITS:
            raise DataError(f"unknown split {name!r}")
        if self.labels is None:
            raise DataError("dataset has no split labels; call split() first")
        return self.images[self.labels == name]

    def sizes(self) -> tuple:
        return tuple(int(np.sum(self.labels == s)) for s in SPLITS)


# --------------------------------------------------------------------------
# IDX

@dataclass
class IdxInfo:
    dtype: np.dtype
    shape: tuple
    raw: np.ndarray


def read_idx(path, normalize: bool = True):
    """Parse an IDX file; returns ``(tensor, info)``.

    The tensor is divided by 255 when ``normalize`` is set; ``info.raw`` keeps
    the stored integers.
    """
    data = Path(path).read_bytes()
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise IdxFormatError(f"{path}: bad magic number")
    code, ndim = data[2], data[3]
    if code not in _IDX_TYPES:
        raise IdxFormatError(f"{path}: unsupported IDX dtype 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - header != expected:
        raise IdxFormatError(
            f"{path}: payload has {len(data) - header} bytes, dimensions need {expected}")
    raw = np.frombuffer(data, dtype=dtype, offset=header).reshape(shape)
    out = raw / 255.0 if normalize else raw.astype(float)
    return out, IdxInfo(dtype, tuple(shape), raw)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise IdxFormatError("write_idx stores unsigned 8-bit data only")
    if array.ndim > 255:
        raise IdxFormatError("too many dimensions for IDX")
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + np.ascontiguousarray(array).tobytes())


def from_idx(path) -> Dataset:
    images, info = read_idx(path)
    if images.ndim != 3:
        raise DataError("an image dataset needs a 3-dimensional IDX file")
    return Dataset(images, provenance={"source": "idx", "path": str(path), "shape": list(info.shape)})


# --------------------------------------------------------------------------
# synthetic oriented shapes

SHAPES = ("bar", "ell", "dots")
_SOFTNESS = 0.35


def _segment_distance(ii, jj, a, b):
    p = np.stack([ii, jj], axis=-1)
    a, b = np.asarray(a), np.asarray(b)
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[..., None] * ab), axis=-1)


def _soft(dist, half_width):
    return 1.0 / (1.0 + np.exp(-(half_width - dist) / _SOFTNESS))


def _render(kind: str, size: int, rng) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float), indexing="ij")
    c = (size - 1) / 2.0
    scale = size / 16.0
    tilt = rng.uniform(-0.2, 0.2)
    d = np.array([math.sin(tilt), math.cos(tilt)])  # (row, col) direction, roughly horizontal
    perp = np.array([d[1], -d[0]])  # roughly downward
    jitter = rng.uniform(-1.0, 1.0, 2) * scale
    if kind == "bar":
        length = rng.uniform(7.0, 10.0) * scale
        mid = np.array([c - rng.uniform(1.5, 3.0) * scale, c]) + jitter
        img = _soft(_segment_distance(ii, jj, mid - d * length / 2, mid + d * length / 2),
                    rng.uniform(1.2, 1.8) * scale)
    elif kind == "ell":
        arm = rng.uniform(6.0, 8.0) * scale
        leg = rng.uniform(4.0, 6.0) * scale
        corner = np.array([c + 2.5 * scale, c - 3.0 * scale]) + jitter
        w = rng.uniform(1.0, 1.4) * scale
        img = np.maximum(_soft(_segment_distance(ii, jj, corner, corner + d * arm), w),
                         _soft(_segment_distance(ii, jj, corner, corner - perp * leg), w))
    elif kind == "dots":
        sep = rng.uniform(5.0, 6.5) * scale
        mid = np.array([c, c]) + jitter
        big, small = rng.uniform(2.4, 3.0) * scale, rng.uniform(1.2, 1.7) * scale
        p1, p2 = mid - d * sep / 2, mid + d * sep / 2
        img = np.maximum(_soft(np.hypot(ii - p1[0], jj - p1[1]), big),
                         _soft(np.hypot(ii - p2[0], jj - p2[1]), small))
    else:
        raise DataError(f"unknown shape {kind!r}")
    window = _soft(np.hypot(ii - c, jj - c), c - 0.5 * scale)
    return np.clip(img * window, 0.0, 1.0)


def asymmetry(image: np.ndarray) -> float:
    """``||x - rot90(x)|| / ||x||``; zero for quarter-turn invariant images."""
    nrm = np.linalg.norm(image)
    return float(np.linalg.norm(image - rotate_quarter(image, 1)) / nrm) if nrm > 0 else 0.0


def inscribed_mass(image: np.ndarray, margin: float = 1.0) -> float:
    """Fraction of the image mass lying inside the inscribed disk shrunk by ``margin``."""
    size = image.shape[-1]
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    c = (size - 1) / 2.0
    inside = np.hypot(ii - c, jj - c) <= c - margin
    total = image.sum()
    return float(image[inside].sum() / total) if total > 0 else 1.0


def synth_oriented(count: int, size: int = 16, group: CyclicGroup | None = None, seed: int = 0,
                   shapes=SHAPES, min_asymmetry: float = 0.1) -> Dataset:
    """Canonical-pose asymmetric shapes with soft edges, rejection sampled.

    Every sample keeps almost all of its mass inside the inscribed disk (so
    rotations lose nothing at the corners) and differs from its own quarter
    turn by more than ``min_asymmetry`` in relative norm.
    """
    if size < 8:
        raise DataError("synthetic shapes need size >= 8")
    if count < 0:
        raise DataError("count must be non-negative")
    rng = np.random.default_rng(seed)
    images = np.zeros((count, size, size))
    kinds = []
    for i in range(count):
        kind = shapes[i % len(shapes)]
        while True:
            img = _render(kind, size, rng)
            if inscribed_mass(img) > 0.98 and asymmetry(img) > min_asymmetry:
                break
        images[i] = img
        kinds.append(kind)
    spec = {"source": "synth_oriented", "count": count, "size": size, "seed": seed,
            "shapes": list(shapes), "group_order": group.order if group else None}
    return Dataset(images, provenance=spec)


def split(dataset: Dataset, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> Dataset:
    """Deterministic shuffled train/val/test partition.

    Validation and test sizes are floors of their fractions; the remainder goes
    to training.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_val, n_test = int(math.floor(fr[1] * n + 1e-9)), int(math.floor(fr[2] * n + 1e-9))
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[order[: n - n_val - n_test]] = "train"
    labels[order[n - n_val - n_test: n - n_test]] = "val"
    labels[order[n - n_test:]] = "test"
    labels = labels.astype(str) if n else np.array([], dtype=str)
    return Dataset(dataset.images, labels, {**dataset.provenance, "split": list(fr), "split_seed": seed})
