"""
Training MiniResNet with ShuffleBlock on toy data
=================================================

Writes a small synthetic dataset in CIFAR-10 binary format, trains for a
few epochs with patch shuffling, then reloads the checkpoint and exports a
class activation map. Everything lands in a temporary directory unless a
path is passed on the command line.
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

images, labels = synthetic_cifar(1200, RandomSource(0), noise=0.3)
write_cifar_binary(root / "train.bin", images[:1000], labels[:1000])
write_cifar_binary(root / "test.bin", images[1000:], labels[1000:])

# the same keys a config file would hold
cfg = parse_config("""
seed = 1
data.train = train.bin
data.test = test.bin
total_epochs = 4
batch_size = 64
shuffle.mode = patch
shuffle.block_size = 3
schedule.0.epoch = 0
schedule.0.lr = 0.1
schedule.0.ch_frac = 0.5
schedule.1.epoch = 3
schedule.1.lr = 0.01
schedule.1.ch_frac = 0.0
output_dir = run
""", root)

for rec in ex.train(cfg):
    print(f"epoch {rec.epoch}  lr {rec.lr:g}  ch_frac {rec.ch_frac:g}  "
          f"train_loss {rec.train_loss:.3f}  test_acc {rec.test_acc:.3f}")

ckpt = cfg.output_dir / ex.CHECKPOINT_NAME
loss, acc = ex.evaluate_checkpoint(cfg, ckpt)
print(f"reloaded checkpoint: test_loss {loss:.4f} test_acc {acc:.3f}")

path, cls = ex.cam_to_pgm(cfg, ckpt, image_index=0)
print(f"class activation map for predicted class {cls}: {path}")
print("outputs in", cfg.output_dir)
