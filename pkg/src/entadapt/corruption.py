"""Deterministic synthetic image corruptions at five severity levels.

Randomness comes from a counter-based Philox generator keyed on the spec seed
(per-image seeds are seed XOR index), with draws emitted in fixed pixel order,
so outputs never depend on traversal or batch order. Severity tables are
artifact-defined constants chosen so distortion grows monotonically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import Dataset

__all__ = ["CORRUPTION_KINDS", "CorruptionSpec", "SEVERITY_TABLES", "apply_corruption", "corrupt_dataset"]

SEVERITY_TABLES: dict[str, tuple] = {
    "gaussian_noise": (0.04, 0.08, 0.12, 0.18, 0.26),  # additive noise sigma
    "shot_noise": (60.0, 25.0, 12.0, 5.0, 3.0),  # Poisson rate scale (lower = noisier)
    "impulse_noise": (0.02, 0.05, 0.09, 0.14, 0.20),  # fraction of pixels flipped
    "brightness": (0.08, 0.16, 0.24, 0.34, 0.45),  # additive offset
    "contrast": (0.60, 0.45, 0.33, 0.24, 0.16),  # scale about the mean (lower = flatter)
    "pixelate": (2, 3, 4, 6, 9),  # downsampling factor
}

CORRUPTION_KINDS = tuple(SEVERITY_TABLES)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SEVERITY_TABLES:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def parameter(self):
        return SEVERITY_TABLES[self.kind][self.severity - 1]


def apply_corruption(image: np.ndarray, spec: CorruptionSpec) -> np.ndarray:
    """Corrupt one CHW image in [0, 1]; a pure function of (image, spec)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError(f"expected a CHW image, got shape {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(spec.seed)))
    p = spec.parameter

    if spec.kind == "gaussian_noise":
        out = image + p * rng.standard_normal(image.shape, dtype=np.float32)
    elif spec.kind == "shot_noise":
        out = rng.poisson(image.astype(np.float64) * p).astype(np.float32) / np.float32(p)
    elif spec.kind == "impulse_noise":
        flip = rng.random(image.shape, dtype=np.float32) < p
        salt = (rng.random(image.shape, dtype=np.float32) < 0.5).astype(np.float32)
        out = np.where(flip, salt, image)
    elif spec.kind == "brightness":
        out = image + np.float32(p)
    elif spec.kind == "contrast":
        mean = np.float32(image.mean(dtype=np.float64))
        out = mean + np.float32(p) * (image - mean)
    elif spec.kind == "pixelate":
        d = int(p)
        small = image[:, ::d, ::d]
        rows = np.arange(image.shape[1]) // d
        cols = np.arange(image.shape[2]) // d
        out = small[:, rows][:, :, cols]
    else:  # pragma: no cover - guarded by CorruptionSpec
        raise ValueError(f"unknown corruption kind {spec.kind!r}")

    return np.clip(out, 0.0, 1.0).astype(np.float32)


def corrupt_dataset(dataset: Dataset, spec: CorruptionSpec) -> Dataset:
    """Corrupt every image with a per-image seed of spec.seed XOR index; labels untouched."""
    out = np.empty_like(dataset.images)
    for i in range(len(dataset)):
        per_image = CorruptionSpec(
            spec.kind, spec.severity, int(np.uint64(spec.seed) ^ np.uint64(i))
        )
        out[i] = apply_corruption(dataset.images[i], per_image)
    return Dataset(
        out,
        None if dataset.labels is None else dataset.labels.copy(),
        name=f"{dataset.name}+{spec.kind}{spec.severity}",
        input_mean=dataset.input_mean,
        input_std=dataset.input_std,
    )
