"""Datasets: IDX ingestion, procedurally rendered glyph domains, and deterministic batching.

The glyph renderer draws ten digit classes from a 5x7 bitmap font with random
placement/scale/rotation jitter. The shifted domain applies a fixed
composition of background clutter, polarity inversion, and contrast reduction
on top, standing in for a real source/target pair.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, read_container, write_container

__all__ = [
    "BatchPlan",
    "Dataset",
    "batches",
    "load_dataset",
    "load_idx",
    "make_glyph_dataset",
    "make_shifted_pair",
    "save_dataset",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Immutable image set in [0, 1] with optional labels and input-norm constants."""

    images: np.ndarray
    labels: np.ndarray | None = None
    name: str = ""
    input_mean: np.ndarray = field(default=None)  # type: ignore[assignment]
    input_std: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("labels must have one entry per image")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")
        c = self.images.shape[1]
        if self.input_mean is None:
            self.input_mean = (
                self.images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
                if self.images.size
                else np.zeros(c, np.float32)
            )
        else:
            self.input_mean = np.asarray(self.input_mean, dtype=np.float32).reshape(c)
        if self.input_std is None:
            self.input_std = (
                np.maximum(self.images.std(axis=(0, 2, 3), dtype=np.float64), 1e-3).astype(
                    np.float32
                )
                if self.images.size
                else np.ones(c, np.float32)
            )
        else:
            self.input_std = np.asarray(self.input_std, dtype=np.float32).reshape(c)

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = False
    shuffle: bool = True


def batches(dataset: Dataset, plan: BatchPlan):
    """Deterministic shuffled partition into (indices, images, labels) triples."""
    if plan.batch_size < 1:
        raise ValueError("batch size must be >= 1")
    n = len(dataset)
    if plan.shuffle:
        order = np.random.default_rng(plan.seed).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, plan.batch_size):
        idx = order[start : start + plan.batch_size]
        if plan.drop_last and idx.size < plan.batch_size:
            return
        labels = dataset.labels[idx] if dataset.labels is not None else None
        yield idx, dataset.images[idx], labels


# ---------------------------------------------------------------------------
# IDX format
# ---------------------------------------------------------------------------


def _read_idx_header(data: bytes, path, magic: int, ndims: int):
    header = 4 * (1 + ndims)
    if len(data) < header:
        raise ValueError(f"{path}: truncated IDX header")
    fields = struct.unpack(f">{1 + ndims}I", data[:header])
    if fields[0] != magic:
        raise ValueError(f"{path}: bad IDX magic 0x{fields[0]:08x}, expected 0x{magic:08x}")
    return fields[1:], data[header:]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse a big-endian IDX image/label file pair, scaling bytes to [0, 1]."""
    img_data = Path(images_path).read_bytes()
    (n, h, w), payload = _read_idx_header(img_data, images_path, IDX_IMAGES_MAGIC, 3)
    if len(payload) != n * h * w:
        raise ValueError(f"{images_path}: expected {n * h * w} pixel bytes, got {len(payload)}")
    images = (
        np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w).astype(np.float32) / 255.0
    )

    lbl_data = Path(labels_path).read_bytes()
    (n_labels,), lbl_payload = _read_idx_header(lbl_data, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lbl_payload) != n_labels:
        raise ValueError(f"{labels_path}: expected {n_labels} label bytes, got {len(lbl_payload)}")
    if n_labels != n:
        raise ValueError(f"image/label count mismatch: {n} images, {n_labels} labels")
    labels = np.frombuffer(lbl_payload, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, name=Path(images_path).stem)


# ---------------------------------------------------------------------------
# Native container format (shared with checkpoints)
# ---------------------------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    tensors = {"images": dataset.images}
    if dataset.labels is not None:
        tensors["labels"] = dataset.labels.astype(np.float32)
    write_container(
        path,
        {
            "kind": "dataset",
            "name": dataset.name,
            "input_mean": [float(v) for v in dataset.input_mean],
            "input_std": [float(v) for v in dataset.input_std],
        },
        tensors,
    )


def load_dataset(path) -> Dataset:
    descriptor, tensors = read_container(path)
    if descriptor.get("kind") != "dataset":
        raise CheckpointError(f"container holds {descriptor.get('kind')!r}, not a dataset")
    labels = tensors.get("labels")
    return Dataset(
        tensors["images"],
        np.rint(labels).astype(np.int64) if labels is not None else None,
        name=descriptor.get("name", ""),
        input_mean=descriptor.get("input_mean"),
        input_std=descriptor.get("input_std"),
    )


# ---------------------------------------------------------------------------
# Glyph domains
# ---------------------------------------------------------------------------

_DIGIT_ROWS = [
    ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
]

_FONT = np.array(
    [[[float(ch) for ch in row] for row in digit] for digit in _DIGIT_ROWS], dtype=np.float32
)
# zero border so bilinear lookups never index out of bounds
_FONT_PADDED = np.pad(_FONT, ((0, 0), (1, 1), (1, 1)))

IMAGE_SIZE = 28


def _render(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Bilinear rendering of 5x7 glyphs into 28x28 with jittered pose."""
    n = labels.shape[0]
    size = IMAGE_SIZE
    scale = rng.uniform(2.6, 3.4, size=n)
    angle = rng.uniform(-0.25, 0.25, size=n)
    dx = rng.uniform(-2.5, 2.5, size=n)
    dy = rng.uniform(-2.5, 2.5, size=n)
    gain = rng.uniform(0.75, 1.0, size=n)

    ys, xs = np.mgrid[0:size, 0:size]
    xs = xs.reshape(-1).astype(np.float64) - (size - 1) / 2
    ys = ys.reshape(-1).astype(np.float64) - (size - 1) / 2
    cos = np.cos(angle)[:, None]
    sin = np.sin(angle)[:, None]
    rx = (xs[None, :] - dx[:, None]) / scale[:, None]
    ry = (ys[None, :] - dy[:, None]) / scale[:, None]
    # inverse-rotate target coords into glyph space; +1 offsets into the pad
    u = cos * rx + sin * ry + 2.0 + 1.0
    v = -sin * rx + cos * ry + 3.0 + 1.0

    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    fu = (u - u0).astype(np.float32)
    fv = (v - v0).astype(np.float32)
    ph, pw = _FONT_PADDED.shape[1:]
    inside = (u0 >= 0) & (u0 < pw - 1) & (v0 >= 0) & (v0 < ph - 1)
    u0c = np.clip(u0, 0, pw - 2)
    v0c = np.clip(v0, 0, ph - 2)
    lab = labels[:, None]
    p00 = _FONT_PADDED[lab, v0c, u0c]
    p01 = _FONT_PADDED[lab, v0c, u0c + 1]
    p10 = _FONT_PADDED[lab, v0c + 1, u0c]
    p11 = _FONT_PADDED[lab, v0c + 1, u0c + 1]
    val = (
        p00 * (1 - fu) * (1 - fv)
        + p01 * fu * (1 - fv)
        + p10 * (1 - fu) * fv
        + p11 * fu * fv
    )
    val = (val * inside) * gain[:, None].astype(np.float32)
    images = val.reshape(n, 1, size, size).astype(np.float32)
    images += rng.normal(0.0, 0.02, size=images.shape).astype(np.float32)
    return np.clip(images, 0.0, 1.0)


def _shift_domain(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Fixed composition: background clutter, polarity inversion, contrast squeeze."""
    n, _, h, w = images.shape
    out = images.copy()
    for i in range(n):
        for _ in range(3):
            bh = int(rng.integers(1, 4))
            bw = int(rng.integers(5, 13))
            if rng.random() < 0.5:
                bh, bw = bw, bh
            top = int(rng.integers(0, h - bh + 1))
            left = int(rng.integers(0, w - bw + 1))
            out[i, 0, top : top + bh, left : left + bw] += np.float32(rng.uniform(0.25, 0.55))
    out = np.clip(out, 0.0, 1.0)
    out = 1.0 - out
    out = 0.5 + 0.55 * (out - 0.5)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_glyph_dataset(n: int, seed: int, shifted: bool = False, name: str = "") -> Dataset:
    """Balanced ten-class glyph set; `shifted` applies the target-domain transform."""
    if n % 10:
        raise ValueError("glyph dataset size must be a multiple of 10 for exact balance")
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(2 if shifted else 1,))
    rng = np.random.default_rng(seq)
    labels = np.tile(np.arange(10, dtype=np.int64), n // 10)
    labels = labels[rng.permutation(n)]
    images = _render(labels, rng)
    if shifted:
        images = _shift_domain(images, rng)
    if not name:
        name = f"glyphs-{'target' if shifted else 'source'}-{seed}"
    return Dataset(images, labels, name=name)


def make_shifted_pair(seed: int, size: int = 2000) -> tuple[Dataset, Dataset]:
    """Matched source/target glyph test sets for the domain-shift experiment."""
    source = make_glyph_dataset(size, seed, shifted=False)
    target = make_glyph_dataset(size, seed + 7919, shifted=True)
    return source, target
