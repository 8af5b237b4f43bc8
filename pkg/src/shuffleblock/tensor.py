"""Dense tensor helpers and the seeded random source.

Tensors are plain row-major ``numpy.ndarray`` objects. Patch access copies,
never returns views, so callers can mutate results freely.
"""
from __future__ import annotations

import hashlib

import numpy as np

# Bump when the derivation of streams changes; recorded in run outputs.
RNG_VERSION = "pcg64-seedseq-sha256/1"

_U64 = (1 << 64) - 1


class BoundsError(IndexError):
    pass


class ShapeError(ValueError):
    pass


def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode("utf-8")).digest()[:8], "little")


class RandomSource:
    """Seeded PCG64 stream.

    ``split(label)`` derives a child stream that depends only on the parent's
    seed, the parent's own derivation path and ``label``. It does not consume
    draws from the parent, so the order in which children are created is
    irrelevant.

    A RandomSource is single-consumer; give each thread its own split.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        if not 0 <= int(seed) <= _U64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self._path = tuple(_path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self._path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def split(self, label: str) -> "RandomSource":
        return RandomSource(self.seed, self._path + (_label_key(label),))

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in the closed range [low, high]."""
        return int(self.generator.integers(low, high, endpoint=True))

    def random(self) -> float:
        return float(self.generator.random())

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, depth={len(self._path)})"


def _check_patch(shape, c, i, j, s):
    C, H, W = shape
    if not 1 <= s <= min(H, W):
        raise BoundsError(f"patch size {s} outside [1, {min(H, W)}]")
    if not 0 <= c < C:
        raise BoundsError(f"channel index {c} outside [0, {C})")
    if not 0 <= i <= H - s:
        raise BoundsError(f"row origin {i} outside [0, {H - s}] for patch size {s}")
    if not 0 <= j <= W - s:
        raise BoundsError(f"column origin {j} outside [0, {W - s}] for patch size {s}")


def read_patch(t: np.ndarray, c: int, i: int, j: int, s: int) -> np.ndarray:
    """Copy of the ``s x s`` patch of channel ``c`` with top-left corner ``(i, j)``."""
    if t.ndim != 3:
        raise ShapeError(f"expected a C x H x W tensor, got shape {t.shape}")
    _check_patch(t.shape, c, i, j, s)
    return t[c, i:i + s, j:j + s].copy()


def write_patch(t: np.ndarray, c: int, i: int, j: int, p: np.ndarray) -> np.ndarray:
    """Return a copy of ``t`` with the patch at ``(c, i, j)`` replaced by ``p``."""
    if t.ndim != 3:
        raise ShapeError(f"expected a C x H x W tensor, got shape {t.shape}")
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ShapeError(f"patch must be square s x s, got shape {p.shape}")
    s = p.shape[0]
    _check_patch(t.shape, c, i, j, s)
    out = t.copy()
    out[c, i:i + s, j:j + s] = p
    return out


def uniform_permutation(r: RandomSource, k: int) -> np.ndarray:
    """Uniform draw from all ``k!`` permutations of ``range(k)``, identity included."""
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    return r.generator.permutation(k)


def sample_distinct(r: RandomSource, k: int, n: int) -> np.ndarray:
    """Sorted uniform ``k``-subset of ``range(n)``."""
    if k < 0 or n < 0:
        raise ValueError(f"k and n must be non-negative, got k={k}, n={n}")
    if k > n:
        raise ValueError(f"cannot draw {k} distinct indices from {n}")
    return np.sort(r.generator.choice(n, size=k, replace=False))
