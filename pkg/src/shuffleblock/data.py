"""CIFAR-10 binary loading, normalization and standard crop/flip augmentation."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import RandomSource

RECORD_BYTES = 3073
IMAGE_SHAPE = (3, 32, 32)


class FormatError(ValueError):
    pass


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    image: np.ndarray  # 3 x 32 x 32
    label: int


@dataclass(frozen=True)
class DatasetStats:
    mean: np.ndarray
    std: np.ndarray


def load_cifar_binary(path, max_records: int | None = None) -> list[Example]:
    """Parse CIFAR-10 binary records: 1 label byte, then R, G, B 32x32 planes."""
    raw = Path(path).read_bytes()
    n_full, rem = divmod(len(raw), RECORD_BYTES)
    if rem:
        raise FormatError(f"{path}: truncated record at offset {n_full * RECORD_BYTES}")
    n = n_full if max_records is None else min(n_full, max_records)
    records = np.frombuffer(raw, dtype=np.uint8, count=n * RECORD_BYTES).reshape(n, RECORD_BYTES)
    labels = records[:, 0]
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        r = int(bad[0])
        raise FormatError(f"{path}: label {labels[r]} >= 10 in record at offset {r * RECORD_BYTES}")
    images = records[:, 1:].reshape(n, *IMAGE_SHAPE).astype(np.float32) / np.float32(255)
    return [Example(images[k], int(labels[k])) for k in range(n)]


def write_cifar_binary(path, images_u8, labels):
    """Inverse of :func:`load_cifar_binary` for uint8 ``N x 3 x 32 x 32`` images."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images_u8.shape[1:] != IMAGE_SHAPE or len(images_u8) != len(labels):
        raise FormatError(f"expected N x 3 x 32 x 32 images with N labels, got {images_u8.shape}")
    out = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = images_u8.reshape(len(labels), -1)
    Path(path).write_bytes(out.tobytes())


def load_split(paths, max_records: int | None = None) -> list[Example]:
    """Concatenate files in order, keeping the first ``max_records`` examples."""
    out: list[Example] = []
    for p in paths:
        if max_records is not None and len(out) >= max_records:
            break
        left = None if max_records is None else max_records - len(out)
        out.extend(load_cifar_binary(p, left))
    return out


def stack(examples) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([e.image for e in examples]) if examples else np.zeros((0, *IMAGE_SHAPE), np.float32)
    return images, np.array([e.label for e in examples], dtype=np.int64)


def crop_flip(image, dy, dx, flip, pad=4):
    """Zero-pad by ``pad``, crop at offset ``(dy, dx)``, optionally mirror horizontally."""
    C, H, W = image.shape
    padded = np.zeros((C, H + 2 * pad, W + 2 * pad), dtype=image.dtype)
    padded[:, pad:pad + H, pad:pad + W] = image
    out = padded[:, dy:dy + H, dx:dx + W]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(e: Example, r: RandomSource, pad=4) -> Example:
    dy = r.integers(0, 2 * pad)
    dx = r.integers(0, 2 * pad)
    flip = r.random() < 0.5
    return Example(crop_flip(e.image, dy, dx, flip, pad), e.label)


def augment_batch(images, r: RandomSource, pad=4):
    """Vectorized :func:`augment` over ``N x C x H x W``; draws in the same order per sample."""
    N, C, H, W = images.shape
    padded = np.zeros((N, C, H + 2 * pad, W + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + H, pad:pad + W] = images
    out = np.empty_like(images)
    for n in range(N):
        dy = r.integers(0, 2 * pad)
        dx = r.integers(0, 2 * pad)
        crop = padded[n, :, dy:dy + H, dx:dx + W]
        out[n] = crop[:, :, ::-1] if r.random() < 0.5 else crop
    return out


def compute_stats(train, strict=True, std_floor=1e-6) -> DatasetStats:
    """Per-channel mean/std over every pixel of the training split.

    A zero-variance channel raises :class:`StatsError` when ``strict``;
    otherwise its std is floored at ``std_floor``.
    """
    images = train if isinstance(train, np.ndarray) else stack(train)[0]
    if len(images) == 0:
        raise StatsError("cannot compute statistics of an empty split")
    x = images.astype(np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    if np.any(std == 0):
        if strict:
            raise StatsError(f"zero std in channel(s) {np.flatnonzero(std == 0).tolist()}")
        std = np.maximum(std, std_floor)
    return DatasetStats(mean, std)


def normalize(e, stats: DatasetStats):
    """Map v -> (v - mean_c) / std_c. Accepts an Example or an image array (3-d or 4-d)."""
    if isinstance(e, Example):
        return Example(normalize(e.image, stats), e.label)
    x = np.asarray(e)
    shape = (-1, 1, 1)
    mean = stats.mean.reshape(shape)
    std = stats.std.reshape(shape)
    return ((x - mean) / std).astype(np.float32)


def synthetic_cifar(n, rng: RandomSource, num_classes=10, noise=0.15):
    """Learnable CIFAR-shaped toy data as uint8 images and labels.

    Each class is a fixed smooth colour/texture template; samples add a
    random spatial shift and pixel noise.
    """
    g = rng.split("templates").generator
    yy, xx = np.mgrid[0:32, 0:32] / 32.0
    templates = []
    for _ in range(num_classes):
        fy, fx = g.uniform(0.5, 3.0, 2)
        phase = g.uniform(0, 2 * np.pi, 3)
        colour = g.uniform(0.2, 0.8, 3)
        planes = [0.5 + 0.35 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase[c]) * colour[c]
                  for c in range(3)]
        templates.append(np.stack(planes))
    s = rng.split("samples").generator
    labels = s.integers(0, num_classes, n)
    images = np.empty((n, 3, 32, 32))
    for k, lab in enumerate(labels):
        shifted = np.roll(templates[lab], tuple(s.integers(-3, 4, 2)), axis=(1, 2))
        images[k] = shifted + s.normal(0, noise, (3, 32, 32))
    return np.clip(np.round(images * 255), 0, 255).astype(np.uint8), labels.astype(np.uint8)
