"""
Block size sweep on synthetic data
==================================

A scaled-down version of the block-size ablation: no shuffling, 3x3 patch
shuffling, and whole-channel shuffling, each trained briefly on synthetic
CIFAR-shaped data. The toy task is far easier than CIFAR-10, so this shows
the mechanics of a sweep rather than the accuracy gaps seen on real data.
"""

import sys
import tempfile
from pathlib import Path

from shuffleblock import experiments as ex
from shuffleblock.config import parse_config
from shuffleblock.data import synthetic_cifar, write_cifar_binary
from shuffleblock.tensor import RandomSource

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="shuffleblock-"))
root.mkdir(parents=True, exist_ok=True)

# heavy pixel noise keeps the toy task from saturating immediately
images, labels = synthetic_cifar(1300, RandomSource(1), noise=0.45)
write_cifar_binary(root / "train.bin", images[:1000], labels[:1000])
write_cifar_binary(root / "test.bin", images[1000:], labels[1000:])

cfg = parse_config("""
seed = 1
data.train = train.bin
data.test = test.bin
total_epochs = 6
batch_size = 64
schedule.0.epoch = 0
schedule.0.lr = 0.1
schedule.0.ch_frac = 0.5
schedule.1.epoch = 5
schedule.1.lr = 0.01
schedule.1.ch_frac = 0.5
output_dir = sweep
""", root)

rows = ex.ablate_block_size(cfg, ["0", "3", "channel"], seeds=[1])
print(f"{'mode':<15} {'block':>5} {'test_acc':>9}")
for mode, size, ch_frac, seed, acc, mean in rows:
    print(f"{mode:<15} {size:>5} {acc:>9.3f}")
print("summary:", cfg.output_dir / "summary.csv")
