"""Flat ``key = value`` run configuration.

Keys (``#`` starts a comment; paths are relative to the config file)::

    seed = 1
    data.train = data_batch_1.bin, data_batch_2.bin
    data.test = test_batch.bin
    data.train_subset = 10000        # optional, "all" for every record
    data.test_subset = 2000
    data.num_classes = 10
    data.stats = strict              # or lenient (std floored at 1e-6)
    data.augment = true
    total_epochs = 400
    batch_size = 64
    momentum = 0.9
    weight_decay = 0.0001
    shuffle.mode = patch             # patch | whole-channel | channel-reverse | off
    shuffle.block_size = 3
    insertion_point = after-second-bn
    schedule.0.epoch = 0             # one triple per milestone, any index order
    schedule.0.lr = 0.1
    schedule.0.ch_frac = 0.6
    seeds = 1, 2, 3                  # seeds used by the ablation sweeps
    output_dir = runs/example
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from .nn import INSERTION_POINTS
from .schedule import Milestone, Schedule, validate
from .shuffle import PatchShuffle, ShuffleConfig, WholeChannelReverse, WholeChannelShuffle

log = logging.getLogger(__name__)

SHUFFLE_MODES = ("patch", "whole-channel", "channel-reverse", "off")


class ConfigError(ValueError):
    def __init__(self, field_path, msg):
        super().__init__(f"{field_path}: {msg}")
        self.field_path = field_path


@dataclass
class RunConfig:
    seed: int
    train_files: list[Path]
    test_files: list[Path]
    schedule: Schedule
    train_subset: int | None = None
    test_subset: int | None = None
    num_classes: int = 10
    stats_mode: str = "strict"
    augment: bool = True
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    shuffle_mode: str = "patch"
    block_size: int = 3
    insertion_point: str = "after-second-bn"
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    output_dir: Path = Path("runs")

    @property
    def total_epochs(self) -> int:
        return self.schedule.total_epochs

    def shuffle_config(self, ch_frac: float) -> ShuffleConfig | None:
        if self.shuffle_mode == "off":
            return None
        mode = {"patch": lambda: PatchShuffle(self.block_size),
                "whole-channel": WholeChannelShuffle,
                "channel-reverse": WholeChannelReverse}[self.shuffle_mode]()
        return ShuffleConfig(ch_frac, mode)

    def replace(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def _parse_lines(text):
    items = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ConfigError(key, f"duplicate key (line {n})")
        items[key] = value
    return items


def _get(items, key, conv, default=...):
    if key not in items:
        if default is ...:
            raise ConfigError(key, "missing required key")
        return default
    raw = items.pop(key)
    try:
        return conv(raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(key, f"invalid value {raw!r} ({e})") from None


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError("expected true/false")


def _subset(s):
    return None if s.lower() == "all" else int(s)


def _list(conv):
    return lambda s: [conv(v.strip()) for v in s.split(",") if v.strip()]


def parse_config(text: str, base_dir=".", seed: int | None = None, output_dir=None) -> RunConfig:
    items = _parse_lines(text)
    base = Path(base_dir)

    def paths(s):
        return [p if p.is_absolute() else base / p for p in map(Path, _list(str)(s))]

    total = _get(items, "total_epochs", int)
    milestones = {}
    for key in [k for k in items if k.startswith("schedule.")]:
        m = re.fullmatch(r"schedule\.(\d+)\.(epoch|lr|ch_frac)", key)
        if not m:
            raise ConfigError(key, "unknown schedule key (expected schedule.<i>.epoch|lr|ch_frac)")
        idx, name = int(m.group(1)), m.group(2)
        conv = int if name == "epoch" else float
        milestones.setdefault(idx, {})[name] = _get(items, key, conv)
    if not milestones:
        raise ConfigError("schedule", "no milestones given")
    ms = []
    for idx in sorted(milestones):
        fields_ = milestones[idx]
        for name in ("epoch", "lr", "ch_frac"):
            if name not in fields_:
                raise ConfigError(f"schedule.{idx}.{name}", "missing required key")
        ms.append(Milestone(**fields_))
    schedule = Schedule(tuple(ms), total)
    diag = validate(schedule)
    if not diag.ok:
        raise ConfigError("schedule", "; ".join(diag.errors))
    for w in diag.warnings:
        log.warning("schedule: %s", w)

    cfg = RunConfig(
        seed=_get(items, "seed", int),
        train_files=_get(items, "data.train", paths),
        test_files=_get(items, "data.test", paths),
        schedule=schedule,
        train_subset=_get(items, "data.train_subset", _subset, None),
        test_subset=_get(items, "data.test_subset", _subset, None),
        num_classes=_get(items, "data.num_classes", int, 10),
        stats_mode=_get(items, "data.stats", str, "strict"),
        augment=_get(items, "data.augment", _bool, True),
        batch_size=_get(items, "batch_size", int, 64),
        momentum=_get(items, "momentum", float, 0.9),
        weight_decay=_get(items, "weight_decay", float, 1e-4),
        shuffle_mode=_get(items, "shuffle.mode", str, "patch"),
        block_size=_get(items, "shuffle.block_size", int, 3),
        insertion_point=_get(items, "insertion_point", str, "after-second-bn"),
        seeds=_get(items, "seeds", _list(int), [1, 2, 3]),
        output_dir=_get(items, "output_dir", lambda s: base / s, base / "runs"),
    )
    if items:
        key = sorted(items)[0]
        raise ConfigError(key, "unknown key")
    if seed is not None:
        cfg.seed = seed
    if output_dir is not None:
        cfg.output_dir = Path(output_dir)
    check(cfg)
    return cfg


def check(cfg: RunConfig):
    if not 0 <= cfg.seed < 2 ** 64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size", "must be >= 1")
    if cfg.shuffle_mode not in SHUFFLE_MODES:
        raise ConfigError("shuffle.mode", f"must be one of {', '.join(SHUFFLE_MODES)}")
    if cfg.block_size < 1:
        raise ConfigError("shuffle.block_size", "must be >= 1")
    if cfg.insertion_point not in INSERTION_POINTS:
        raise ConfigError("insertion_point", f"must be one of {', '.join(INSERTION_POINTS)}")
    if cfg.stats_mode not in ("strict", "lenient"):
        raise ConfigError("data.stats", "must be strict or lenient")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError("momentum", "must lie in [0, 1)")
    if cfg.weight_decay < 0:
        raise ConfigError("weight_decay", "must be non-negative")
    if not cfg.train_files:
        raise ConfigError("data.train", "no files given")
    if not cfg.test_files:
        raise ConfigError("data.test", "no files given")


def load_config(path, seed: int | None = None, output_dir=None) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent, seed=seed, output_dir=output_dir)


def dump_config(cfg: RunConfig) -> str:
    """Serialize with absolute paths; ``parse_config(dump_config(c))`` reproduces ``c``."""
    def subset(v):
        return "all" if v is None else str(v)

    lines = [
        f"seed = {cfg.seed}",
        f"data.train = {', '.join(str(Path(p).resolve()) for p in cfg.train_files)}",
        f"data.test = {', '.join(str(Path(p).resolve()) for p in cfg.test_files)}",
        f"data.train_subset = {subset(cfg.train_subset)}",
        f"data.test_subset = {subset(cfg.test_subset)}",
        f"data.num_classes = {cfg.num_classes}",
        f"data.stats = {cfg.stats_mode}",
        f"data.augment = {str(cfg.augment).lower()}",
        f"total_epochs = {cfg.total_epochs}",
        f"batch_size = {cfg.batch_size}",
        f"momentum = {cfg.momentum!r}",
        f"weight_decay = {cfg.weight_decay!r}",
        f"shuffle.mode = {cfg.shuffle_mode}",
        f"shuffle.block_size = {cfg.block_size}",
        f"insertion_point = {cfg.insertion_point}",
    ]
    for i, m in enumerate(cfg.schedule.milestones):
        lines += [f"schedule.{i}.epoch = {m.epoch}", f"schedule.{i}.lr = {m.lr!r}",
                  f"schedule.{i}.ch_frac = {m.ch_frac!r}"]
    lines += [f"seeds = {', '.join(map(str, cfg.seeds))}",
              f"output_dir = {Path(cfg.output_dir).resolve()}"]
    return "\n".join(lines) + "\n"
