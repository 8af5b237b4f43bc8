"""
Shuffling patches across channels
=================================

A shuffle event picks some channels, one square patch location shared by
all of them, and a permutation. Everything outside those patches is left
alone, and applying the inverse permutation puts the values back.
"""

import numpy as np

from shuffleblock import (PatchShuffle, Phase, ShuffleConfig, WholeChannelShuffle,
                          RandomSource, apply_plan, invert_plan, sample_plan, shuffle_forward)

# a 4 x 5 x 5 feature map where channel c holds the value c everywhere
x = np.stack([np.full((5, 5), float(c)) for c in range(4)])

# half the channels, 3x3 patches
cfg = ShuffleConfig(ch_frac=0.5, mode=PatchShuffle(block_size=3))
plan = sample_plan(RandomSource(4), *x.shape, cfg)
print("channels", plan.channels, "origin", plan.origin, "size", plan.size, "perm", plan.perm)

y = apply_plan(x, plan)
for c in plan.channels:
    print(f"channel {c} after shuffling:\n{y[c]}")

# the backward pass is the same move with the inverse permutation
restored = apply_plan(y, invert_plan(plan))
print("restored exactly:", np.array_equal(restored, x))

# whole-channel shuffling moves entire maps instead of patches
y, plans = shuffle_forward(x[None], ShuffleConfig(1.0, WholeChannelShuffle()),
                           Phase.TRAINING, RandomSource(0))
print("whole-channel order:", [int(y[0, c, 0, 0]) for c in range(4)])

# at inference the operator returns its input untouched
batch = x[None]
y, plans = shuffle_forward(batch, cfg, Phase.INFERENCE, None)
print("inference returns the input itself:", y is batch and plans == [])
