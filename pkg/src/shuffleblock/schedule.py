"""Inverted Step Scheduling.

A schedule is a right-continuous step function over epochs. Each milestone
sets both the learning rate and ``ch_frac``; "at epoch 160" means epoch 160
already uses the new values.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Milestone:
    epoch: int
    lr: float
    ch_frac: float


@dataclass
class Diagnostics:
    errors: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass(frozen=True)
class Schedule:
    milestones: tuple[Milestone, ...]
    total_epochs: int

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(self.milestones))

    def value_at(self, epoch: int) -> tuple[float, float]:
        return value_at(self, epoch)

    def validate(self) -> Diagnostics:
        return validate(self)


def value_at(s: Schedule, epoch: int) -> tuple[float, float]:
    if not 0 <= epoch < s.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {s.total_epochs})")
    epochs = [m.epoch for m in s.milestones]
    idx = bisect.bisect_right(epochs, epoch) - 1
    if idx < 0:
        raise ValueError(f"no milestone at or before epoch {epoch}")
    m = s.milestones[idx]
    return m.lr, m.ch_frac


def validate(s: Schedule) -> Diagnostics:
    d = Diagnostics()
    ms = s.milestones
    if s.total_epochs < 1:
        d.errors.append(f"total_epochs must be positive, got {s.total_epochs}")
    if not ms:
        d.errors.append("schedule has no milestones")
        return d
    if ms[0].epoch != 0:
        d.errors.append(f"first milestone epoch must be 0, got {ms[0].epoch}")
    for a, b in zip(ms, ms[1:]):
        if b.epoch <= a.epoch:
            d.errors.append(f"non-increasing epoch: {a.epoch} then {b.epoch}")
    for m in ms:
        if not 0.0 <= m.ch_frac <= 1.0:
            d.errors.append(f"ch_frac {m.ch_frac} at epoch {m.epoch} outside [0, 1]")
        if not m.lr > 0:
            d.errors.append(f"lr {m.lr} at epoch {m.epoch} is not positive")
        if m.epoch >= s.total_epochs:
            d.errors.append(f"milestone epoch {m.epoch} not below total_epochs {s.total_epochs}")
    if ms[-1].ch_frac != 0.0:
        d.warnings.append("ch_frac never reaches 0")
    return d


def step_schedule(total_epochs, lr_drops, ch_frac_drops, lr=0.1, ch_frac=0.5, factor=0.1):
    """Build a schedule from independent lr and ch_frac drop lists.

    ``lr_drops`` is a list of epochs where lr is multiplied by ``factor``;
    ``ch_frac_drops`` is a list of ``(epoch, new_ch_frac)``.
    """
    events = sorted({0, *lr_drops, *(e for e, _ in ch_frac_drops)})
    frac_at = dict(ch_frac_drops)
    ms = []
    cur_lr, cur_frac = lr, ch_frac
    for e in events:
        if e in lr_drops:
            cur_lr *= factor
        cur_frac = frac_at.get(e, cur_frac)
        ms.append(Milestone(e, float(f"{cur_lr:.12g}"), cur_frac))
    return Schedule(tuple(ms), total_epochs)


def cifar_is_schedule() -> Schedule:
    """400-epoch CIFAR schedule with Inverted Step Scheduling."""
    return step_schedule(400, [160, 240, 320, 360], [(160, 0.5), (240, 0.4), (360, 0.0)],
                         lr=0.1, ch_frac=0.6)


def cifar_constant_schedule(ch_frac=0.5) -> Schedule:
    """400-epoch CIFAR schedule with ``ch_frac`` held fixed."""
    return step_schedule(400, [160, 240, 320, 360], [], lr=0.1, ch_frac=ch_frac)


def pyramidnet48_is_schedule() -> Schedule:
    return step_schedule(300, [150, 225, 275], [(150, 0.5), (225, 0.4), (275, 0.0)],
                         lr=0.1, ch_frac=0.6)


def pyramidnet200_is_schedule() -> Schedule:
    return step_schedule(300, [150, 225, 275], [(150, 0.4), (225, 0.3), (275, 0.0)],
                         lr=0.25, ch_frac=0.5)


def imagenet_is_schedule() -> Schedule:
    # lr and ch_frac drops do not coincide here
    return step_schedule(300, [75, 150, 225], [(150, 0.4), (225, 0.3), (275, 0.0)],
                         lr=0.1, ch_frac=0.5)
