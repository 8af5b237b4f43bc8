from pathlib import Path

import numpy as np
import pytest

from shuffleblock import data
from shuffleblock.config import parse_config
from shuffleblock.tensor import RandomSource

REPO = Path(__file__).resolve().parents[1]

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy_data_dir(tmp_path_factory):
    """Small synthetic CIFAR-format train/test files."""
    d = tmp_path_factory.mktemp("toy")
    x, y = data.synthetic_cifar(56, RandomSource(0), noise=0.3)
    data.write_cifar_binary(d / "train.bin", x[:40], y[:40])
    data.write_cifar_binary(d / "test.bin", x[40:], y[40:])
    return d


TOY_CONFIG = """\
seed = 7
data.train = {train}
data.test = {test}
total_epochs = 2
batch_size = 16
momentum = 0.9
weight_decay = 0.0001
shuffle.mode = {mode}
shuffle.block_size = 3
schedule.0.epoch = 0
schedule.0.lr = 0.05
schedule.0.ch_frac = {f0}
schedule.1.epoch = 1
schedule.1.lr = 0.005
schedule.1.ch_frac = {f1}
seeds = 1, 2
output_dir = {out}
"""


@pytest.fixture
def make_config(toy_data_dir, tmp_path):
    def make(mode="patch", f0=0.5, f1=0.0, out="run", **overrides):
        text = TOY_CONFIG.format(train=toy_data_dir / "train.bin", test=toy_data_dir / "test.bin",
                                 mode=mode, f0=f0, f1=f1, out=tmp_path / out)
        cfg = parse_config(text, tmp_path)
        return cfg.replace(**overrides) if overrides else cfg

    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
