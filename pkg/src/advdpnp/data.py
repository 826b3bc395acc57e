"""Datasets: Gaussian blobs, IDX image files, augmentation and batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from advdpnp._io import atomic_write_bytes

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    split: str = "train"
    box: tuple[float, float] = (0.0, 1.0)
    image: bool = False

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.shape[0] < 1 or x.shape[0] != y.shape[0] or y.ndim != 1:
            raise ValueError(f"inputs {x.shape} and labels {y.shape} do not align")
        if y.min() < 0:
            raise ValueError("labels must be non-negative")
        lo, hi = self.box
        if x.min() < lo or x.max() > hi:
            raise ValueError(f"inputs fall outside the box [{lo}, {hi}]")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "box", (float(lo), float(hi)))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.split, self.box, self.image)


@dataclass(frozen=True)
class BlobSpec:
    centers: tuple[tuple[float, ...], ...]
    std: float = 0.05
    samples_per_class: int = 100
    seed: int = 0
    box: tuple[float, float] = (0.0, 1.0)
    split: str = "train"

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("need at least two blob centers of equal dimension")
        if len({tuple(row) for row in c.tolist()}) != len(c):
            raise ValueError("blob centers must be pairwise distinct")
        if not self.std > 0:
            raise ValueError("std must be positive")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be at least 1")
        object.__setattr__(self, "centers", tuple(tuple(float(v) for v in row) for row in c))
        object.__setattr__(self, "box", (float(self.box[0]), float(self.box[1])))

    @property
    def num_classes(self) -> int:
        return len(self.centers)

    @property
    def dim(self) -> int:
        return len(self.centers[0])


def gen_blobs(spec: BlobSpec) -> Dataset:
    """Isotropic Gaussian samples per center, clipped to the box, class-major order."""
    rng = np.random.default_rng(spec.seed)
    centers = np.asarray(spec.centers)
    m, d = centers.shape
    n = spec.samples_per_class
    x = centers[:, None, :] + spec.std * rng.standard_normal((m, n, d))
    x = np.clip(x.reshape(m * n, d), *spec.box)
    y = np.repeat(np.arange(m), n)
    return Dataset(x, y, spec.split, spec.box)


# ------------------------------------------------------------------ IDX


def _read_idx(path, magic: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IdxError(f"{path}: payload has {len(raw) - header} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "test") -> Dataset:
    """Images (N, rows, cols) scaled to [0, 1] with their uint8 labels."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return Dataset(images.astype(np.float64) / 255.0, labels.astype(np.int64), split, (0.0, 1.0), image=True)


def idx_bytes(array: np.ndarray, magic: int) -> bytes:
    array = np.asarray(array)
    if array.ndim != magic & 0xFF:
        raise IdxError(f"array rank {array.ndim} does not match magic 0x{magic:08x}")
    return struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape) + array.astype(np.uint8).tobytes()


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Inverse of ``load_idx``; pixels must be exact multiples of 1/255."""
    pixels = np.rint(dataset.inputs * 255.0)
    if not np.allclose(pixels / 255.0, dataset.inputs, rtol=0, atol=1e-12):
        raise IdxError("inputs are not representable as 8-bit pixels")
    atomic_write_bytes(images_path, idx_bytes(pixels, IDX_IMAGES_MAGIC))
    atomic_write_bytes(labels_path, idx_bytes(dataset.labels, IDX_LABELS_MAGIC))


# ---------------------------------------------------------- augmentation


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4, flip_prob: float = 0.5) -> np.ndarray:
    """Zero-pad-and-random-crop plus random horizontal flip, per sample.

    ``batch`` is (B, H, W) or (B, C, H, W).
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim not in (3, 4):
        raise ValueError(f"augment expects image batches, got shape {batch.shape}")
    h, w = batch.shape[-2:]
    widths = [(0, 0)] * (batch.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(batch, widths)
    dy = rng.integers(0, 2 * pad + 1, size=len(batch))
    dx = rng.integers(0, 2 * pad + 1, size=len(batch))
    flips = rng.uniform(size=len(batch)) < flip_prob
    out = np.empty_like(batch)
    for i in range(len(batch)):
        crop = padded[i, ..., dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = hflip(crop) if flips[i] else crop
    return out


def batches(n: int | Dataset, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index arrays of one shuffled pass; the last batch may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be at least 1")
    n = len(n) if isinstance(n, Dataset) else int(n)
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
