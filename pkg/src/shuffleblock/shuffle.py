"""ShuffleBlock: random inter-channel shuffling of co-located square patches.

A shuffle event is fully described by a :class:`ShufflePlan`. Applying a plan
is a permutation of tensor entries, so the backward pass is the same
operation with the inverse permutation.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .tensor import RandomSource, sample_distinct, uniform_permutation


class PlanError(ValueError):
    pass


class Phase(enum.Enum):
    TRAINING = "training"
    INFERENCE = "inference"


@dataclass(frozen=True)
class PatchShuffle:
    block_size: int = 3

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {self.block_size}")


@dataclass(frozen=True)
class WholeChannelShuffle:
    pass


@dataclass(frozen=True)
class WholeChannelReverse:
    pass


ShuffleMode = PatchShuffle | WholeChannelShuffle | WholeChannelReverse


@dataclass(frozen=True)
class ShuffleConfig:
    ch_frac: float = 0.5
    mode: ShuffleMode = field(default_factory=PatchShuffle)

    def __post_init__(self):
        if not 0.0 <= self.ch_frac <= 1.0:
            raise ValueError(f"ch_frac must lie in [0, 1], got {self.ch_frac}")

    def with_ch_frac(self, ch_frac: float) -> "ShuffleConfig":
        return replace(self, ch_frac=ch_frac)

    @property
    def is_whole_channel(self) -> bool:
        return not isinstance(self.mode, PatchShuffle)


@dataclass(frozen=True)
class ShufflePlan:
    """One shuffle event on a single C x H x W sample.

    For ``t in range(k)`` the patch of channel ``channels[t]`` receives the
    patch of channel ``channels[perm[t]]``. All patches share ``origin`` and
    ``size``. ``whole_channel`` plans move entire H x W maps regardless of
    ``origin``/``size``.
    """

    channels: np.ndarray
    origin: tuple[int, int]
    size: int
    perm: np.ndarray
    whole_channel: bool = False

    @property
    def k(self) -> int:
        return len(self.channels)

    @property
    def is_identity(self) -> bool:
        return self.k < 2 or bool(np.all(self.perm == np.arange(self.k)))

    def check(self, shape: Sequence[int]):
        C, H, W = shape
        if len(self.perm) != self.k:
            raise PlanError(f"perm has {len(self.perm)} entries for {self.k} channels")
        if self.k and (self.channels.min() < 0 or self.channels.max() >= C):
            raise PlanError(f"plan channels {self.channels.tolist()} invalid for C={C}")
        if self.whole_channel:
            return
        i, j = self.origin
        s = self.size
        if s < 1 or not (0 <= i <= H - s and 0 <= j <= W - s):
            raise PlanError(f"patch origin {self.origin} size {s} invalid for {H}x{W} map")

    def support_mask(self, shape: Sequence[int]) -> np.ndarray:
        """Boolean C x H x W mask of the entries this plan may move."""
        mask = np.zeros(shape, dtype=bool)
        if self.k < 2:
            return mask
        if self.whole_channel:
            mask[self.channels] = True
        else:
            i, j = self.origin
            mask[self.channels, i:i + self.size, j:j + self.size] = True
        return mask


def identity_plan() -> ShufflePlan:
    empty = np.zeros(0, dtype=np.intp)
    return ShufflePlan(empty, (0, 0), 1, empty)


def sample_plan(r: RandomSource, C: int, H: int, W: int, cfg: ShuffleConfig) -> ShufflePlan:
    k = math.floor(cfg.ch_frac * C + 1e-9)
    if k < 2:
        return identity_plan()
    channels = sample_distinct(r, k, C)
    mode = cfg.mode
    if isinstance(mode, PatchShuffle):
        s = min(mode.block_size, H, W)
        i = r.integers(0, H - s)
        j = r.integers(0, W - s)
        return ShufflePlan(channels, (i, j), s, uniform_permutation(r, k))
    if isinstance(mode, WholeChannelShuffle):
        perm = uniform_permutation(r, k)
    else:
        perm = np.arange(k - 1, -1, -1)
    return ShufflePlan(channels, (0, 0), min(H, W), perm, whole_channel=True)


def _move(out, src, plan):
    # out and src are C x H x W views
    ch = plan.channels
    if plan.whole_channel:
        out[ch] = src[ch[plan.perm]]
    else:
        i, j = plan.origin
        s = plan.size
        out[ch, i:i + s, j:j + s] = src[ch[plan.perm], i:i + s, j:j + s]


def apply_plan(x: np.ndarray, plan: ShufflePlan) -> np.ndarray:
    if x.ndim != 3:
        raise PlanError(f"apply_plan expects a C x H x W tensor, got shape {x.shape}")
    plan.check(x.shape)
    out = x.copy()
    if plan.k >= 2:
        _move(out, x, plan)
    return out


def invert_plan(plan: ShufflePlan) -> ShufflePlan:
    # argsort inverts a bijection and still yields a valid index array otherwise
    return replace(plan, perm=np.argsort(plan.perm, kind="stable"))


def shuffle_forward(x: np.ndarray, cfg: ShuffleConfig, phase: Phase, r: RandomSource | None):
    """Apply ShuffleBlock to an N x C x H x W batch.

    Returns ``(y, plans)``. In inference ``y is x`` and ``plans`` is empty;
    in training one plan is drawn per sample from ``r``.
    """
    if x.ndim != 4:
        raise PlanError(f"shuffle_forward expects N x C x H x W, got shape {x.shape}")
    if phase is Phase.INFERENCE:
        return x, []
    N, C, H, W = x.shape
    plans = [sample_plan(r, C, H, W, cfg) for _ in range(N)]
    return _apply_batch(x, plans), plans


def _apply_batch(x, plans):
    y = x.copy()
    for n, plan in enumerate(plans):
        if plan.k >= 2:
            plan.check(x.shape[1:])
            _move(y[n], x[n], plan)
    return y


def shuffle_backward(g: np.ndarray, plans: Sequence[ShufflePlan]) -> np.ndarray:
    if not plans:
        return g
    if len(plans) != g.shape[0]:
        raise PlanError(f"got {len(plans)} plans for a batch of {g.shape[0]}")
    return _apply_batch(g, [invert_plan(p) for p in plans])


def shuffle_replay(x: np.ndarray, plans: Sequence[ShufflePlan]) -> np.ndarray:
    """Re-apply recorded plans to a batch (frozen-noise evaluation)."""
    if not plans:
        return x
    if len(plans) != x.shape[0]:
        raise PlanError(f"got {len(plans)} plans for a batch of {x.shape[0]}")
    return _apply_batch(x, plans)
