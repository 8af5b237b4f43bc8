"""A small reverse-mode layer stack: enough to train a residual CNN on CPU.

Each layer's ``forward`` returns ``(output, cache)`` and ``backward`` consumes
the cache, writing parameter gradients into a dict keyed by full parameter
name. :class:`MiniResNet` wires the layers together and hands back a
:class:`Tape` holding every cache of one forward call.
"""
from __future__ import annotations

import copy
import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .shuffle import Phase, ShuffleConfig, shuffle_backward, shuffle_forward, shuffle_replay
from .tensor import RandomSource

CHECKPOINT_MAGIC = b"SBLK1"
INSERTION_POINTS = ("after-second-bn", "after-first-relu")


class LayerError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class _Ctx:
    phase: Phase
    rng: RandomSource | None
    replay: dict | None
    plans: dict = field(default_factory=dict)
    relu_masks: dict = field(default_factory=dict)


def _nchw(x):
    return (x.shape[1], x.shape[0], *x.shape[2:]) if x.ndim == 4 else x.shape


class Layer:
    index: int = -1
    name: str = ""

    def parameters(self):
        return []

    def state(self):
        return []

    def _fail(self, msg):
        raise LayerError(f"layer {self.index} ({self.name}): {msg}")


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=1):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        self.weight = np.zeros((out_channels, in_channels, kernel, kernel), np.float32)

    def init(self, r: RandomSource):
        fan_in = self.in_channels * self.kernel ** 2
        w = r.generator.standard_normal(self.weight.shape) * np.sqrt(2.0 / fan_in)
        self.weight[...] = w

    def parameters(self):
        return [(self.name + ".weight", "weight", True)]

    def forward(self, x, ctx):
        # x is channel-major: C x N x H x W
        if x.ndim != 4 or x.shape[0] != self.in_channels:
            self._fail(f"expected {self.in_channels} input channels, got input of shape {_nchw(x)}")
        C, N, H, W = x.shape
        k, s, p = self.kernel, self.stride, self.padding
        Ho = (H + 2 * p - k) // s + 1
        Wo = (W + 2 * p - k) // s + 1
        if Ho < 1 or Wo < 1:
            self._fail(f"input {H}x{W} too small for a {k}x{k} kernel")
        if k == 1 and p == 0:
            cols = np.ascontiguousarray(x[:, :, ::s, ::s]).reshape(C, -1)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
            cols6 = np.empty((C, k, k, N, Ho, Wo), dtype=x.dtype)
            for a in range(k):
                for b in range(k):
                    cols6[:, a, b] = xp[:, :, a:a + s * (Ho - 1) + 1:s, b:b + s * (Wo - 1) + 1:s]
            cols = cols6.reshape(C * k * k, -1)
        y = (self.weight.reshape(self.out_channels, -1) @ cols).reshape(self.out_channels, N, Ho, Wo)
        return y, (x.shape, cols)

    def backward(self, g, cache, grads):
        (C, N, H, W), cols = cache
        k, s, p = self.kernel, self.stride, self.padding
        O, _, Ho, Wo = g.shape
        g2 = g.reshape(O, -1)
        wm = self.weight.reshape(O, -1)
        grads[self.name + ".weight"] = (g2 @ cols.T).reshape(self.weight.shape)
        dcols = (wm.T @ g2).reshape(C, k, k, N, Ho, Wo)
        dxp = np.zeros((C, N, H + 2 * p, W + 2 * p), dtype=g.dtype)
        for a in range(k):
            for b in range(k):
                dxp[:, :, a:a + s * (Ho - 1) + 1:s, b:b + s * (Wo - 1) + 1:s] += dcols[:, a, b]
        return dxp[:, :, p:p + H, p:p + W] if p else dxp


class BatchNorm2d(Layer):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(channels, np.float32)
        self.beta = np.zeros(channels, np.float32)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)

    def parameters(self):
        return [(self.name + ".gamma", "gamma", False), (self.name + ".beta", "beta", False)]

    def state(self):
        return [(self.name + ".running_mean", "running_mean"),
                (self.name + ".running_var", "running_var")]

    def forward(self, x, ctx):
        if x.ndim != 4 or x.shape[0] != self.channels:
            self._fail(f"expected {self.channels} input channels, got input of shape {_nchw(x)}")
        g = self.gamma[:, None, None, None]
        b = self.beta[:, None, None, None]
        if ctx.phase is Phase.INFERENCE:
            invstd = (1.0 / np.sqrt(self.running_var + self.eps)).astype(x.dtype)
            xhat = (x - self.running_mean[:, None, None, None]) * invstd[:, None, None, None]
            return g * xhat + b, (False, xhat, invstd)
        m = x[0].size
        mean = x.mean(axis=(1, 2, 3))
        xc = x - mean[:, None, None, None]
        var = (xc * xc).mean(axis=(1, 2, 3))
        invstd = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * invstd[:, None, None, None]
        mom = self.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        self.running_mean[...] = (1 - mom) * self.running_mean + mom * mean
        self.running_var[...] = (1 - mom) * self.running_var + mom * unbiased
        return g * xhat + b, (True, xhat, invstd)

    def backward(self, g, cache, grads):
        batch_stats, xhat, invstd = cache
        grads[self.name + ".gamma"] = (g * xhat).sum(axis=(1, 2, 3))
        grads[self.name + ".beta"] = g.sum(axis=(1, 2, 3))
        dxhat = g * self.gamma[:, None, None, None]
        if not batch_stats:
            return dxhat * invstd[:, None, None, None]
        mean_d = dxhat.mean(axis=(1, 2, 3))[:, None, None, None]
        mean_dx = (dxhat * xhat).mean(axis=(1, 2, 3))[:, None, None, None]
        return (dxhat - mean_d - xhat * mean_dx) * invstd[:, None, None, None]


class ReLU(Layer):
    def forward(self, x, ctx):
        mask = x > 0
        ctx.relu_masks[self.name] = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, g, mask, grads):
        return np.where(mask, g, 0).astype(g.dtype, copy=False)


class ShuffleHandle:
    """Mutable holder for the ShuffleConfig shared by every ShuffleBlockLayer."""

    def __init__(self, config: ShuffleConfig):
        self.config = config


class ShuffleBlockLayer(Layer):
    def __init__(self, handle: ShuffleHandle):
        self.handle = handle

    def forward(self, x, ctx):
        if ctx.phase is Phase.INFERENCE:
            ctx.plans[self.name] = []
            return x, []
        xs = x.transpose(1, 0, 2, 3)
        if ctx.replay is not None and self.name in ctx.replay:
            plans = ctx.replay[self.name]
            y = shuffle_replay(xs, plans)
        else:
            if ctx.rng is None:
                self._fail("training-phase forward needs a RandomSource")
            y, plans = shuffle_forward(xs, self.handle.config, ctx.phase, ctx.rng.split(self.name))
        ctx.plans[self.name] = plans
        # contiguous output keeps downstream reductions in the same summation order
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3)), plans

    def backward(self, g, plans, grads):
        if not plans:
            return g
        return np.ascontiguousarray(shuffle_backward(g.transpose(1, 0, 2, 3), plans).transpose(1, 0, 2, 3))


class GlobalAvgPool(Layer):
    def forward(self, x, ctx):
        return x.mean(axis=(2, 3)).T, x.shape

    def backward(self, g, shape, grads):
        C, N, H, W = shape
        return np.broadcast_to((g.T / (H * W))[:, :, None, None], shape)


class Linear(Layer):
    def __init__(self, in_features, out_features):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features), np.float32)
        self.bias = np.zeros(out_features, np.float32)

    def init(self, r: RandomSource):
        bound = 1.0 / np.sqrt(self.in_features)
        self.weight[...] = r.generator.uniform(-bound, bound, self.weight.shape)

    def parameters(self):
        return [(self.name + ".weight", "weight", True), (self.name + ".bias", "bias", False)]

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            self._fail(f"expected N x {self.in_features} input, got {x.shape}")
        return x @ self.weight.T + self.bias, x

    def backward(self, g, x, grads):
        grads[self.name + ".weight"] = g.T @ x
        grads[self.name + ".bias"] = g.sum(axis=0)
        return g @ self.weight


class ResidualAdd(Layer):
    def forward(self, a, b, ctx):
        if a.shape != b.shape:
            self._fail(f"branch shapes differ: {a.shape} vs {b.shape}")
        return a + b, None

    def backward(self, g, cache, grads):
        return g, g


class BasicBlock:
    """conv-bn-relu-conv-bn (+ShuffleBlock) + shortcut, then relu."""

    def __init__(self, in_ch, out_ch, stride, handle, insertion_point):
        self.conv1 = Conv2d(in_ch, out_ch, 3, stride, 1)
        self.bn1 = BatchNorm2d(out_ch)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, 1, 1)
        self.bn2 = BatchNorm2d(out_ch)
        self.shuffle = ShuffleBlockLayer(handle) if handle is not None else None
        self.insertion_point = insertion_point
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, stride, 0)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = self.proj_bn = None
        self.add = ResidualAdd()
        self.relu2 = ReLU()

    def named_layers(self):
        yield from [("conv1", self.conv1), ("bn1", self.bn1), ("relu1", self.relu1)]
        if self.shuffle is not None and self.insertion_point == "after-first-relu":
            yield "shuffle", self.shuffle
        yield from [("conv2", self.conv2), ("bn2", self.bn2)]
        if self.shuffle is not None and self.insertion_point == "after-second-bn":
            yield "shuffle", self.shuffle
        if self.proj is not None:
            yield from [("proj", self.proj), ("proj_bn", self.proj_bn)]
        yield from [("add", self.add), ("relu2", self.relu2)]

    def forward(self, x, ctx):
        c = {}
        h = x
        for key in ("conv1", "bn1", "relu1"):
            h, c[key] = getattr(self, key).forward(h, ctx)
        if self.shuffle is not None and self.insertion_point == "after-first-relu":
            h, c["shuffle"] = self.shuffle.forward(h, ctx)
        for key in ("conv2", "bn2"):
            h, c[key] = getattr(self, key).forward(h, ctx)
        if self.shuffle is not None and self.insertion_point == "after-second-bn":
            h, c["shuffle"] = self.shuffle.forward(h, ctx)
        sc = x
        if self.proj is not None:
            sc, c["proj"] = self.proj.forward(sc, ctx)
            sc, c["proj_bn"] = self.proj_bn.forward(sc, ctx)
        out, c["add"] = self.add.forward(h, sc, ctx)
        out, c["relu2"] = self.relu2.forward(out, ctx)
        return out, c

    def backward(self, g, c, grads):
        g = self.relu2.backward(g, c["relu2"], grads)
        gh, gsc = self.add.backward(g, c["add"], grads)
        if self.proj is not None:
            gsc = self.proj_bn.backward(gsc, c["proj_bn"], grads)
            gsc = self.proj.backward(gsc, c["proj"], grads)
        if self.shuffle is not None and self.insertion_point == "after-second-bn":
            gh = self.shuffle.backward(gh, c["shuffle"], grads)
        gh = self.bn2.backward(gh, c["bn2"], grads)
        gh = self.conv2.backward(gh, c["conv2"], grads)
        if self.shuffle is not None and self.insertion_point == "after-first-relu":
            gh = self.shuffle.backward(gh, c["shuffle"], grads)
        gh = self.relu1.backward(gh, c["relu1"], grads)
        gh = self.bn1.backward(gh, c["bn1"], grads)
        gh = self.conv1.backward(gh, c["conv1"], grads)
        return gh + gsc


@dataclass
class Tape:
    net_id: int
    caches: dict
    plans: dict
    relu_masks: dict
    features: np.ndarray
    consumed: bool = False


_net_ids = itertools.count()


class MiniResNet:
    """Stem, three stages of basic residual blocks (16/32/64 channels), GAP, linear head.

    ``shuffle`` is the shared config for every ShuffleBlockLayer; pass
    ``None`` to build the network without any ShuffleBlock.
    """

    def __init__(self, num_classes=10, shuffle: ShuffleConfig | None = None,
                 insertion_point="after-second-bn", widths=(16, 32, 64), blocks_per_stage=2,
                 in_channels=3, rng: RandomSource | None = None):
        if insertion_point not in INSERTION_POINTS:
            raise ValueError(f"unknown insertion point {insertion_point!r}")
        self.num_classes = num_classes
        self.insertion_point = insertion_point
        self.handle = ShuffleHandle(shuffle) if shuffle is not None else None
        self.stem_conv = Conv2d(in_channels, widths[0], 3, 1, 1)
        self.stem_bn = BatchNorm2d(widths[0])
        self.stem_relu = ReLU()
        self.stages = []
        in_ch = widths[0]
        for si, w in enumerate(widths):
            stage = []
            for bi in range(blocks_per_stage):
                stride = 2 if (si > 0 and bi == 0) else 1
                stage.append(BasicBlock(in_ch, w, stride, self.handle, insertion_point))
                in_ch = w
            self.stages.append(stage)
        self.pool = GlobalAvgPool()
        self.fc = Linear(in_ch, num_classes)
        self._id = next(_net_ids)
        for idx, (name, layer) in enumerate(self.named_layers()):
            layer.index = idx
            layer.name = name
        self.init(rng if rng is not None else RandomSource(0))

    def named_layers(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn", self.stem_bn
        yield "stem.relu", self.stem_relu
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                for key, layer in block.named_layers():
                    yield f"stage{si + 1}.block{bi}.{key}", layer
        yield "head.pool", self.pool
        yield "head.fc", self.fc

    def init(self, r: RandomSource):
        for name, layer in self.named_layers():
            if hasattr(layer, "init"):
                layer.init(r.split(name))

    @property
    def shuffle_config(self):
        return self.handle.config if self.handle else None

    def set_shuffle_config(self, cfg: ShuffleConfig):
        if self.handle is not None:
            self.handle.config = cfg

    def params(self) -> dict:
        """Parameter arrays by full name, in checkpoint order."""
        out = {}
        for _, layer in self.named_layers():
            for full, attr, _ in layer.parameters():
                out[full] = getattr(layer, attr)
        return out

    @property
    def decay_names(self) -> set:
        return {full for _, l in self.named_layers() for full, _, d in l.parameters() if d}

    def state_arrays(self) -> dict:
        """Parameters followed by BatchNorm running statistics, in checkpoint order."""
        out = self.params()
        for _, layer in self.named_layers():
            for full, attr in layer.state():
                out[full] = getattr(layer, attr)
        return out

    def astype(self, dtype) -> "MiniResNet":
        net = copy.deepcopy(self)
        net._id = next(_net_ids)
        for _, layer in net.named_layers():
            for attr in ("weight", "bias", "gamma", "beta", "running_mean", "running_var"):
                if hasattr(layer, attr):
                    setattr(layer, attr, getattr(layer, attr).astype(dtype))
        return net

    @property
    def dtype(self):
        return self.stem_conv.weight.dtype

    def forward(self, x, phase: Phase = Phase.INFERENCE, rng: RandomSource | None = None,
                plans: dict | None = None):
        """Return ``(logits, tape)``.

        ``rng`` feeds the ShuffleBlock layers; each layer draws from
        ``rng.split(layer_name)``. ``plans`` (layer name -> recorded plans)
        replays a previous forward's shuffle noise instead of sampling.
        """
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4:
            raise LayerError(f"layer 0 (stem.conv): expected N x C x H x W input, got {x.shape}")
        x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        ctx = _Ctx(phase, rng, plans)
        caches = {}
        h, caches["stem.conv"] = self.stem_conv.forward(x, ctx)
        h, caches["stem.bn"] = self.stem_bn.forward(h, ctx)
        h, caches["stem.relu"] = self.stem_relu.forward(h, ctx)
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage):
                h, caches[(si, bi)] = block.forward(h, ctx)
        features = h.transpose(1, 0, 2, 3)
        h, caches["head.pool"] = self.pool.forward(h, ctx)
        logits, caches["head.fc"] = self.fc.forward(h, ctx)
        return logits, Tape(self._id, caches, ctx.plans, ctx.relu_masks, features)

    def backward(self, tape: Tape, loss_grad) -> dict:
        if tape.net_id != self._id:
            raise TapeError("tape was recorded by a different network")
        if tape.consumed:
            raise TapeError("tape already consumed by a previous backward")
        tape.consumed = True
        c = tape.caches
        grads = {}
        g = np.asarray(loss_grad, dtype=self.dtype)
        g = self.fc.backward(g, c["head.fc"], grads)
        g = self.pool.backward(g, c["head.pool"], grads)
        for si in reversed(range(len(self.stages))):
            for bi in reversed(range(len(self.stages[si]))):
                g = self.stages[si][bi].backward(g, c[(si, bi)], grads)
        g = self.stem_relu.backward(g, c["stem.relu"], grads)
        g = self.stem_bn.backward(g, c["stem.bn"], grads)
        self.stem_conv.backward(g, c["stem.conv"], grads)
        return {name: grads[name] for name in self.params()}


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.intp)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"expected {N} labels, got shape {labels.shape}")
    if N and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K})")
    rows = np.arange(N)
    top = logits.argmax(axis=1)
    z = logits - logits[rows, top][:, None]
    e = np.exp(z)
    e[rows, top] = 0.0
    # log(1 + sum of the non-max terms) keeps relative precision when the loss is tiny
    logsum = np.log1p(e.sum(axis=1))
    loss = float(np.mean(logsum - z[rows, labels]))
    logp = z - logsum[:, None]
    grad = np.exp(logp)
    grad[rows, labels] -= 1
    return loss, (grad / N).astype(logits.dtype, copy=False)


@dataclass
class SgdState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)


def sgd_step(params: dict, grads: dict, state: SgdState, decay: set | None = None):
    """In-place momentum SGD.

    ``decay`` names the parameters that receive weight decay; ``None`` means
    all of them.
    """
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay and (decay is None or name in decay):
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= state.momentum
        v += g
        p -= state.lr * v


def cam(features, head_weights, class_id, normalize=True):
    """Class activation map of one sample, min-max scaled to [0, 1]."""
    features = np.asarray(features, dtype=np.float64)
    w = np.asarray(head_weights, dtype=np.float64)
    if not 0 <= class_id < w.shape[0]:
        raise ValueError(f"class_id {class_id} outside [0, {w.shape[0]})")
    heat = np.tensordot(w[class_id], features, axes=(0, 0))
    if not normalize:
        return heat
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 0:
        return np.zeros_like(heat)
    return (heat - lo) / (hi - lo)


def save_checkpoint(net: MiniResNet, path):
    """Write ``net.state_arrays()`` as: magic, then per tensor rank/dims (u32) and f32 values."""
    buf = bytearray(CHECKPOINT_MAGIC)
    for arr in net.state_arrays().values():
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(net: MiniResNet, path):
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic bytes")
    off = len(CHECKPOINT_MAGIC)
    try:
        for name, arr in net.state_arrays().items():
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            if tuple(dims) != arr.shape:
                raise CheckpointError(f"{path}: {name} has shape {dims}, expected {arr.shape}")
            n = int(np.prod(dims))
            if off + 4 * n > len(data):
                raise CheckpointError(f"{path}: truncated while reading {name}")
            arr[...] = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(dims)
            off += 4 * n
    except struct.error as e:
        raise CheckpointError(f"{path}: truncated header at offset {off}") from e
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return net
