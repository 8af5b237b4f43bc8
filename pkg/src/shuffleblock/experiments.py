"""Training, evaluation, ablation sweeps and CAM export driven by a RunConfig."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import astuple, dataclass
from pathlib import Path

import numpy as np

from . import data
from .config import RunConfig, dump_config
from .nn import (MiniResNet, SgdState, cam, load_checkpoint, save_checkpoint, sgd_step,
                 softmax_cross_entropy)
from .schedule import Milestone, Schedule
from .shuffle import Phase
from .tensor import RandomSource

log = logging.getLogger(__name__)

METRICS_SCHEMA = "shuffleblock-metrics/1"
METRICS_HEADER = ("epoch", "lr", "ch_frac", "train_loss", "train_acc", "test_loss", "test_acc")
SUMMARY_HEADER = ("mode", "block_size", "ch_frac", "seed", "final_test_acc", "mean_test_acc")
CHECKPOINT_NAME = "checkpoint.sblk"


@dataclass
class MetricsRecord:
    epoch: int
    lr: float
    ch_frac: float
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    wall_seconds: float


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


@dataclass
class Datasets:
    train_x: np.ndarray  # raw [0, 1] images
    train_y: np.ndarray
    test_x: np.ndarray  # normalized
    test_y: np.ndarray
    stats: data.DatasetStats


def load_datasets(cfg: RunConfig) -> Datasets:
    for p in [*cfg.train_files, *cfg.test_files]:
        if not Path(p).is_file():
            raise FileNotFoundError(f"dataset file not found: {p}")
    train_x, train_y = data.stack(data.load_split(cfg.train_files, cfg.train_subset))
    test_x, test_y = data.stack(data.load_split(cfg.test_files, cfg.test_subset))
    for name, y in (("data.train", train_y), ("data.test", test_y)):
        if len(y) and y.max() >= cfg.num_classes:
            raise data.FormatError(f"{name}: label {y.max()} >= data.num_classes={cfg.num_classes}")
    stats = data.compute_stats(train_x, strict=cfg.stats_mode == "strict")
    return Datasets(train_x, train_y, data.normalize(test_x, stats), test_y, stats)


def build_model(cfg: RunConfig, seed: int | None = None) -> MiniResNet:
    seed = cfg.seed if seed is None else seed
    _, ch_frac = cfg.schedule.value_at(0)
    return MiniResNet(cfg.num_classes, cfg.shuffle_config(ch_frac), cfg.insertion_point,
                      rng=RandomSource(seed).split("init"))


def evaluate(net: MiniResNet, x, y, batch_size=256):
    """Inference-phase mean loss and accuracy, reduced in batch order."""
    total_loss = 0.0
    correct = 0
    for start in range(0, len(y), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        logits, _ = net.forward(xb, Phase.INFERENCE)
        loss, _ = softmax_cross_entropy(logits, yb)
        total_loss += loss * len(yb)
        correct += int((logits.argmax(axis=1) == yb).sum())
    n = max(len(y), 1)
    return total_loss / n, correct / n


def train(cfg: RunConfig, datasets: Datasets | None = None, out_dir=None) -> list[MetricsRecord]:
    """Train MiniResNet under ``cfg``; write metrics.csv, timing.csv and the checkpoint.

    Every random draw derives from ``cfg.seed``; timing.csv holds the only
    non-deterministic output.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = datasets if datasets is not None else load_datasets(cfg)
    (out / "config.resolved").write_text(dump_config(cfg))
    root = RandomSource(cfg.seed)
    net = build_model(cfg)
    sgd = SgdState(lr=cfg.schedule.value_at(0)[0], momentum=cfg.momentum,
                   weight_decay=cfg.weight_decay)
    params, decay = net.params(), net.decay_names
    n = len(ds.train_y)
    records = []
    with open(out / "metrics.csv", "w", newline="") as mf, \
            open(out / "timing.csv", "w", newline="") as tf:
        mw, tw = csv.writer(mf, lineterminator="\n"), csv.writer(tf, lineterminator="\n")
        mw.writerow(METRICS_HEADER)
        tw.writerow(("epoch", "wall_seconds"))
        for epoch in range(cfg.total_epochs):
            t0 = time.perf_counter()
            lr, ch_frac = cfg.schedule.value_at(epoch)
            sgd.lr = lr
            shuffle_cfg = cfg.shuffle_config(ch_frac)
            if shuffle_cfg is not None:
                net.set_shuffle_config(shuffle_cfg)
            order = root.split(f"order/{epoch}").generator.permutation(n)
            aug = root.split(f"augment/{epoch}")
            loss_sum, correct = 0.0, 0
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                xb, yb = ds.train_x[idx], ds.train_y[idx]
                if cfg.augment:
                    xb = data.augment_batch(xb, aug)
                xb = data.normalize(xb, ds.stats)
                logits, tape = net.forward(xb, Phase.TRAINING, root.split(f"shuffle/{epoch}/{b}"))
                loss, g = softmax_cross_entropy(logits, yb)
                sgd_step(params, net.backward(tape, g), sgd, decay)
                loss_sum += loss * len(idx)
                correct += int((logits.argmax(axis=1) == yb).sum())
            test_loss, test_acc = evaluate(net, ds.test_x, ds.test_y)
            rec = MetricsRecord(epoch, lr, ch_frac, loss_sum / max(n, 1), correct / max(n, 1),
                                test_loss, test_acc, time.perf_counter() - t0)
            records.append(rec)
            mw.writerow([_fmt(v) for v in astuple(rec)[:-1]])
            tw.writerow([epoch, _fmt(rec.wall_seconds)])
            mf.flush()
            tf.flush()
            log.info("epoch %d lr %g ch_frac %g train %.4f/%.4f test %.4f/%.4f", epoch, lr, ch_frac,
                     rec.train_loss, rec.train_acc, test_loss, test_acc)
    save_checkpoint(net, out / CHECKPOINT_NAME)
    return records


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def load_model(cfg: RunConfig, checkpoint) -> MiniResNet:
    return load_checkpoint(build_model(cfg), checkpoint)


def evaluate_checkpoint(cfg: RunConfig, checkpoint, datasets: Datasets | None = None):
    ds = datasets if datasets is not None else load_datasets(cfg)
    return evaluate(load_model(cfg, checkpoint), ds.test_x, ds.test_y)


def parse_block_size(token) -> tuple[str, int]:
    """Sweep token -> (shuffle mode, block size). ``0`` means shuffle off."""
    t = str(token).strip().lower()
    if t in ("channel", "whole-channel"):
        return "whole-channel", 0
    if t in ("channel-reverse", "reverse"):
        return "channel-reverse", 0
    size = int(t)
    if size < 0:
        raise ValueError(f"block size must be >= 0, got {size}")
    return ("off", 0) if size == 0 else ("patch", size)


def constant_ch_frac(schedule: Schedule, ch_frac: float) -> Schedule:
    ms = tuple(Milestone(m.epoch, m.lr, ch_frac) for m in schedule.milestones)
    return Schedule(ms, schedule.total_epochs)


def _sweep(cells, seeds, out_dir, datasets):
    rows = []
    for tag, mode, size, cell_cfg in cells:
        accs = []
        for seed in seeds:
            cfg = cell_cfg.replace(seed=seed)
            recs = train(cfg, datasets, Path(out_dir) / tag / f"seed-{seed}")
            accs.append(recs[-1].test_acc if recs else float("nan"))
        mean = float(np.mean(accs))
        _, ch_frac = cell_cfg.schedule.value_at(0)
        for seed, acc in zip(seeds, accs):
            rows.append((mode, size, ch_frac, seed, acc, mean))
    path = Path(out_dir) / "summary.csv"
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return rows


def ablate_block_size(cfg: RunConfig, sizes, seeds=None, out_dir=None, datasets=None):
    """One training run per (size, seed); rows in the order given."""
    if not sizes:
        raise ValueError("sizes must be non-empty")
    seeds = list(cfg.seeds if seeds is None else seeds)
    ds = datasets if datasets is not None else load_datasets(cfg)
    cells = []
    for token in sizes:
        mode, size = parse_block_size(token)
        tag = f"{mode}-{size}" if mode == "patch" else mode
        cells.append((tag, mode, size, cfg.replace(shuffle_mode=mode, block_size=max(size, 1))))
    return _sweep(cells, seeds, out_dir or cfg.output_dir, ds)


def ablate_ch_frac(cfg: RunConfig, fracs, seeds=None, out_dir=None, datasets=None, block_size=3):
    """Constant-ch_frac sweep with patch shuffling at ``block_size``."""
    if not fracs:
        raise ValueError("fracs must be non-empty")
    for f in fracs:
        if not 0 <= f <= 1:
            raise ValueError(f"ch_frac {f} outside [0, 1]")
    seeds = list(cfg.seeds if seeds is None else seeds)
    ds = datasets if datasets is not None else load_datasets(cfg)
    cells = [(f"ch_frac-{f!r}", "patch", block_size,
              cfg.replace(shuffle_mode="patch", block_size=block_size,
                          schedule=constant_ch_frac(cfg.schedule, float(f))))
             for f in fracs]
    return _sweep(cells, seeds, out_dir or cfg.output_dir, ds)


def upsample_nearest(heat, size=32):
    h, w = heat.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    return heat[rows][:, cols]


def write_pgm(path, heat):
    """Binary PGM (P5, maxval 255) of a [0, 1] heatmap."""
    h, w = heat.shape
    pixels = np.clip(np.round(np.asarray(heat) * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def image_cam(net: MiniResNet, image, class_id=None, size=32):
    """Upsampled CAM of one normalized 3 x H x W image; ``None`` uses the predicted class."""
    logits, tape = net.forward(image[None], Phase.INFERENCE)
    if class_id is None:
        class_id = int(logits[0].argmax())
    heat = cam(tape.features[0], net.fc.weight, class_id)
    return upsample_nearest(heat, size), class_id


def cam_to_pgm(cfg: RunConfig, checkpoint, image_index, class_id=None, out_path=None,
               datasets=None):
    ds = datasets if datasets is not None else load_datasets(cfg)
    if not 0 <= image_index < len(ds.test_y):
        raise IndexError(f"image index {image_index} outside [0, {len(ds.test_y)})")
    net = load_model(cfg, checkpoint)
    heat, cls = image_cam(net, ds.test_x[image_index], class_id)
    if out_path is None:
        out_path = Path(cfg.output_dir) / f"cam-{image_index}-class{cls}.pgm"
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out_path, heat)
    return Path(out_path), cls
