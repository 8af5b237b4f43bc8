"""Central finite-difference checks for MiniResNet with frozen shuffle plans."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import MiniResNet, softmax_cross_entropy
from .shuffle import Phase
from .tensor import RandomSource


def rel_error(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckReport:
    checked: list = field(default_factory=list)  # (param name, flat index, analytic, numeric, rel)
    skipped_kinks: int = 0

    @property
    def max_rel_error(self) -> float:
        return max((c[4] for c in self.checked), default=0.0)

    @property
    def layer_kinds(self) -> set:
        return {param_kind(name) for name, *_ in self.checked}


def param_kind(name: str) -> str:
    if name.startswith("head.fc"):
        return "linear." + name.rsplit(".", 1)[1]
    if name.endswith((".gamma", ".beta")):
        return "batchnorm." + name.rsplit(".", 1)[1]
    return "conv.weight"


def _masks_equal(a, b):
    return all(np.array_equal(a[k], b[k]) for k in a)


def check_network_gradients(net: MiniResNet, x, labels, rng: RandomSource, n_params=100,
                            step=1e-3, seed=0, max_tries=50) -> GradCheckReport:
    """Compare analytic and central-difference gradients of the mean cross-entropy.

    ``net`` should be float64. Shuffle plans from the first forward are
    replayed for every perturbed forward. Parameters whose perturbation flips
    a ReLU mask (a kink inside the difference interval) are resampled, as the
    finite difference is meaningless there.
    """
    logits, tape = net.forward(x, Phase.TRAINING, rng)
    plans = tape.plans
    base_masks = tape.relu_masks
    _, g = softmax_cross_entropy(logits, labels)
    grads = net.backward(tape, g)
    params = net.params()
    names = list(params)
    pick = np.random.default_rng(seed)
    report = GradCheckReport()

    def loss_at():
        out, t = net.forward(x, Phase.TRAINING, plans=plans)
        return softmax_cross_entropy(out, labels)[0], t.relu_masks

    tries = dict.fromkeys(names, 0)
    seen = set()
    turn = 0
    while len(report.checked) < n_params:
        live = [n for n in names if tries[n] < max_tries]
        if not live:
            raise RuntimeError("too many kink crossings; use a smaller input")
        # round-robin over tensors so every layer type is covered
        name = live[turn % len(live)]
        p = params[name]
        flat = int(pick.integers(p.size))
        if (name, flat) in seen:
            tries[name] += 1
            continue
        seen.add((name, flat))
        view = p.reshape(-1)
        orig = view[flat]
        view[flat] = orig + step
        lp, mp = loss_at()
        view[flat] = orig - step
        lm, mm = loss_at()
        view[flat] = orig
        if not (_masks_equal(base_masks, mp) and _masks_equal(base_masks, mm)):
            report.skipped_kinks += 1
            tries[name] += 1
            continue
        turn += 1
        num = (lp - lm) / (2 * step)
        ana = float(grads[name].reshape(-1)[flat])
        report.checked.append((name, flat, ana, num, rel_error(ana, num)))
    return report


def gradcheck_setup(seed=0, batch=4, size=8, ch_frac=0.5, block_size=2):
    """Small float64 MiniResNet with patch ShuffleBlock and a random batch."""
    from .shuffle import PatchShuffle, ShuffleConfig

    r = RandomSource(seed)
    net = MiniResNet(10, ShuffleConfig(ch_frac, PatchShuffle(block_size)),
                     rng=r.split("init")).astype(np.float64)
    g = r.split("data").generator
    # non-trivial BN affine parameters so gamma/beta gradients are generic
    for name, p in net.params().items():
        if name.endswith(".gamma"):
            p[...] = g.uniform(0.5, 1.5, p.shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            p[...] = g.uniform(-0.2, 0.2, p.shape)
    x = g.standard_normal((batch, 3, size, size))
    labels = g.integers(0, 10, batch)
    return net, x, labels, r.split("shuffle")
