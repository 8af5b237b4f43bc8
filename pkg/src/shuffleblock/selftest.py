"""Property self-test: one line per invariant with pass/fail and measured error."""
from __future__ import annotations

import tempfile
from collections import Counter
from dataclasses import dataclass, replace
from itertools import combinations, permutations
from pathlib import Path

import numpy as np
from scipy.stats import chisquare

from . import data, schedule
from .gradcheck import check_network_gradients, gradcheck_setup
from .nn import MiniResNet, cam, load_checkpoint, save_checkpoint
from .shuffle import (PatchShuffle, Phase, ShuffleConfig, WholeChannelReverse,
                      WholeChannelShuffle, apply_plan, invert_plan, sample_plan, shuffle_backward,
                      shuffle_forward)
from .tensor import RandomSource, read_patch, sample_distinct, uniform_permutation, write_patch


@dataclass
class PropertyResult:
    name: str
    passed: bool
    measured: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} {self.measured}"


def random_shuffle_config(g: np.random.Generator) -> ShuffleConfig:
    kind = g.integers(3)
    mode = (PatchShuffle(int(g.integers(1, 7))), WholeChannelShuffle(), WholeChannelReverse())[kind]
    return ShuffleConfig(float(g.choice([0.0, 0.1, 0.25, 0.5, 0.6, 0.8, 1.0])), mode)


def random_case(g: np.random.Generator):
    shape = (int(g.integers(1, 4)), int(g.integers(1, 9)), int(g.integers(1, 9)),
             int(g.integers(1, 9)))
    x = g.standard_normal(shape).astype(np.float32)
    return x, random_shuffle_config(g), RandomSource(int(g.integers(2 ** 63)))


def _sorted_samples(x):
    return np.sort(x.reshape(x.shape[0], -1), axis=1)


def permutation_cases(n_cases=10_000, seed=0, corrupt=False):
    """Check conservation, locality and exact invertibility on random cases.

    Returns counts of violations for each property. ``corrupt`` replaces each
    sampled permutation by a non-bijective map (negative control).
    """
    g = np.random.default_rng(seed)
    bad = Counter()
    for _ in range(n_cases):
        x, cfg, r = random_case(g)
        y, plans = shuffle_forward(x, cfg, Phase.TRAINING, r)
        if corrupt:
            plans = [replace(p, perm=np.zeros_like(p.perm)) if p.k >= 2 else p for p in plans]
            y = np.stack([apply_plan(x[n], p) for n, p in enumerate(plans)])
        if not np.array_equal(_sorted_samples(y), _sorted_samples(x)):
            bad["conservation"] += 1
        for n, plan in enumerate(plans):
            mask = plan.support_mask(x.shape[1:])
            if not np.array_equal(y[n][~mask], x[n][~mask]):
                bad["locality"] += 1
            if plan.k >= 2 and not plan.whole_channel:
                # every moved entry lies in one co-located square on the selected channels
                i, j = plan.origin
                s = plan.size
                region = np.zeros(x.shape[2:], dtype=bool)
                region[i:i + s, j:j + s] = True
                if not np.all(mask[plan.channels] == region):
                    bad["colocation"] += 1
        if not np.array_equal(shuffle_backward(y, plans), x):
            bad["invertibility"] += 1
    return bad


def chi2_permutations(draws=240_000, k=4, seed=1):
    r = RandomSource(seed)
    counts = Counter(tuple(uniform_permutation(r, k)) for _ in range(draws))
    observed = [counts[p] for p in permutations(range(k))]
    return chisquare(observed).pvalue


def chi2_subsets(draws=120_000, k=2, n=4, seed=2):
    r = RandomSource(seed)
    counts = Counter(tuple(sample_distinct(r, k, n)) for _ in range(draws))
    observed = [counts[c] for c in combinations(range(n), k)]
    return chisquare(observed).pvalue


def _patch_roundtrip():
    g = np.random.default_rng(3)
    t = g.standard_normal((3, 8, 8)).astype(np.float32)
    worst = 0
    for c in range(3):
        for s in range(1, 9):
            for i in range(9 - s):
                for j in range(9 - s):
                    p = g.standard_normal((s, s)).astype(np.float32)
                    back = read_patch(write_patch(t, c, i, j, p), c, i, j, s)
                    worst += int(not np.array_equal(back, p))
    return PropertyResult("tensor.patch_roundtrip", worst == 0, f"mismatches={worst}")


def _seed_replay():
    a = RandomSource(42).split("layer")
    b = RandomSource(42).split("layer")
    da = [uniform_permutation(a, 7).tolist() for _ in range(50)]
    db = [uniform_permutation(b, 7).tolist() for _ in range(50)]
    return PropertyResult("tensor.seed_replay", da == db, f"identical={da == db}")


def _linearity():
    g = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        x, cfg, r = random_case(g)
        z = g.standard_normal(x.shape)
        a, b = g.standard_normal(2)
        plans = [sample_plan(r, *x.shape[1:], cfg) for _ in range(x.shape[0])]
        f = lambda v: np.stack([apply_plan(v[n], p) for n, p in enumerate(plans)])
        worst = max(worst, float(np.abs(f(a * x + b * z) - (a * f(x) + b * f(z))).max()))
    return PropertyResult("shuffle.linearity", worst <= 1e-12, f"max_abs_err={worst:.3e}")


def _reverse_involution():
    g = np.random.default_rng(6)
    bad = 0
    for _ in range(500):
        x = g.standard_normal((int(g.integers(2, 9)), 4, 4))
        plan = sample_plan(RandomSource(int(g.integers(2 ** 32))), *x.shape,
                           ShuffleConfig(float(g.uniform(0.25, 1.0)), WholeChannelReverse()))
        bad += int(not np.array_equal(apply_plan(apply_plan(x, plan), plan), x))
    return PropertyResult("shuffle.reverse_involution", bad == 0, f"violations={bad}")


def _inference_identity():
    g = np.random.default_rng(7)
    bad = 0
    for _ in range(500):
        x, cfg, r = random_case(g)
        y, plans = shuffle_forward(x, cfg, Phase.INFERENCE, r)
        bad += int(not (np.array_equal(y, x) and plans == []))
    return PropertyResult("shuffle.inference_identity", bad == 0, f"violations={bad}")


def _gradient_check():
    net, x, y, r = gradcheck_setup(seed=0)
    rep = check_network_gradients(net, x, y, r, n_params=100)
    ok = rep.max_rel_error <= 1e-4 and len(rep.layer_kinds) == 5
    return PropertyResult("netcore.gradient_check", ok,
                          f"max_rel_err={rep.max_rel_error:.2e} params={len(rep.checked)}")


def _ch_frac_zero():
    r = RandomSource(8)
    net = MiniResNet(10, ShuffleConfig(0.0, PatchShuffle(3)), rng=r.split("init"))
    x = r.split("x").generator.standard_normal((4, 3, 16, 16)).astype(np.float32)
    # compare training forwards so BatchNorm uses batch statistics in both
    base = MiniResNet(10, None, rng=r.split("init"))
    a, _ = net.forward(x, Phase.TRAINING, r.split("s"))
    b, _ = base.forward(x, Phase.TRAINING, r.split("s"))
    c1, _ = net.forward(x, Phase.INFERENCE)
    c2, _ = net.forward(x, Phase.INFERENCE)
    ok = np.array_equal(a, b) and np.array_equal(c1, c2)
    return PropertyResult("netcore.ch_frac0_transparency", ok, f"bitwise={ok}")


def _batchnorm_stats():
    from .nn import BatchNorm2d, _Ctx

    bn = BatchNorm2d(5)
    x = (np.random.default_rng(9).standard_normal((5, 8, 6, 6)) * 3 + 2).astype(np.float32)
    _, (_, xhat, _) = bn.forward(x, _Ctx(Phase.TRAINING, None, None))
    mean_err = float(np.abs(xhat.mean(axis=(1, 2, 3))).max())
    var_err = float(np.abs(xhat.astype(np.float64).var(axis=(1, 2, 3)) - 1).max())
    ok = mean_err <= 1e-5 and var_err <= 1e-4
    return PropertyResult("netcore.batchnorm_stats", ok, f"mean_err={mean_err:.1e} var_err={var_err:.1e}")


def _schedule_is_400():
    s = schedule.cifar_is_schedule()
    expect = [(0, 160, 0.6), (160, 240, 0.5), (240, 360, 0.4), (360, 400, 0.0)]
    bad = sum(s.value_at(e)[1] != f for lo, hi, f in expect for e in range(lo, hi))
    lrs = [(0, 0.1), (160, 0.01), (240, 0.001), (320, 0.0001), (360, 0.00001)]
    bad += sum(s.value_at(e)[0] != lr for e, lr in lrs)
    d = s.validate()
    ok = bad == 0 and d.ok and not d.warnings
    return PropertyResult("schedule.is_400_epoch", ok, f"mismatched_epochs={bad}")


def _schedule_diagnostics():
    M = schedule.Milestone
    d1 = schedule.Schedule((M(0, 0.1, 0.5),), 10).validate()
    d2 = schedule.Schedule((M(0, 0.1, 0.5), M(5, 0.01, 0.0), M(5, 0.001, 0.0)), 10).validate()
    ok = d1.ok and d1.warnings == ["ch_frac never reaches 0"] and not d2.ok
    return PropertyResult("schedule.diagnostics", ok, f"warnings={len(d1.warnings)} errors={len(d2.errors)}")


def _loader_roundtrip(tmp: Path):
    g = np.random.default_rng(10)
    imgs = g.integers(0, 256, (20, 3, 32, 32), dtype=np.uint8)
    labels = g.integers(0, 10, 20)
    data.write_cifar_binary(tmp / "rt.bin", imgs, labels)
    ex = data.load_cifar_binary(tmp / "rt.bin")
    back = np.stack([np.round(e.image * 255) for e in ex]).astype(np.uint8)
    ok = np.array_equal(back, imgs) and [e.label for e in ex] == labels.tolist()
    (tmp / "trunc.bin").write_bytes(b"\0" * 3072)
    try:
        data.load_cifar_binary(tmp / "trunc.bin")
        rejected = False
    except data.FormatError as e:
        rejected = "truncated record at offset 0" in str(e)
    return [PropertyResult("data.loader_roundtrip", ok, f"bitwise={ok}"),
            PropertyResult("data.truncated_rejected", rejected, f"rejected={rejected}")]


def _cam_one_hot():
    g = np.random.default_rng(11)
    feats = g.standard_normal((6, 4, 4))
    w = np.zeros((3, 6))
    w[1, 4] = 1.0
    raw = cam(feats, w, 1, normalize=False)
    err = float(np.abs(raw - feats[4]).max())
    return PropertyResult("cam.one_hot_channel", err <= 1e-6, f"max_abs_err={err:.1e}")


def _checkpoint_roundtrip(tmp: Path):
    net = MiniResNet(10, None, rng=RandomSource(12))
    save_checkpoint(net, tmp / "a.sblk")
    other = load_checkpoint(MiniResNet(10, None, rng=RandomSource(13)), tmp / "a.sblk")
    ok = all(np.array_equal(a, b) for a, b in zip(net.state_arrays().values(),
                                                  other.state_arrays().values()))
    return PropertyResult("netcore.checkpoint_roundtrip", ok, f"bitwise={ok}")


PROPERTY_NAMES = (
    "tensor.patch_roundtrip", "tensor.seed_replay", "tensor.permutation_uniformity",
    "tensor.subset_uniformity", "shuffle.conservation", "shuffle.locality", "shuffle.colocation",
    "shuffle.invertibility", "shuffle.inference_identity", "shuffle.linearity",
    "shuffle.reverse_involution", "netcore.gradient_check", "netcore.ch_frac0_transparency",
    "netcore.batchnorm_stats", "netcore.checkpoint_roundtrip", "schedule.is_400_epoch",
    "schedule.diagnostics", "data.loader_roundtrip", "data.truncated_rejected",
    "cam.one_hot_channel",
)


def run_selftest(n_cases=10_000, corrupt_permutation=False, echo=print) -> list[PropertyResult]:
    """Run every property; ``corrupt_permutation`` is the negative-control debug hook."""
    results = [_patch_roundtrip(), _seed_replay()]
    p = chi2_permutations()
    results.append(PropertyResult("tensor.permutation_uniformity", p > 1e-3, f"chi2_p={p:.4f}"))
    p = chi2_subsets()
    results.append(PropertyResult("tensor.subset_uniformity", p > 1e-3, f"chi2_p={p:.4f}"))
    bad = permutation_cases(n_cases, corrupt=corrupt_permutation)
    for key in ("conservation", "locality", "colocation", "invertibility"):
        results.append(PropertyResult(f"shuffle.{key}", bad[key] == 0,
                                      f"violations={bad[key]}/{n_cases}"))
    results += [_inference_identity(), _linearity(), _reverse_involution(), _gradient_check(),
                _ch_frac_zero(), _batchnorm_stats()]
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d)
        results.append(_checkpoint_roundtrip(tmp))
        results += [_schedule_is_400(), _schedule_diagnostics()]
        results += _loader_roundtrip(tmp)
    results.append(_cam_one_hot())
    assert tuple(r.name for r in results) == PROPERTY_NAMES
    if echo is not None:
        for r in results:
            echo(r.line())
    return results
