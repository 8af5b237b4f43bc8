"""ShuffleBlock regularization for CNNs, with a small numpy training stack."""
from .schedule import Milestone, Schedule, value_at
from .shuffle import (PatchShuffle, Phase, ShuffleConfig, ShufflePlan, WholeChannelReverse,
                      WholeChannelShuffle, apply_plan, invert_plan, sample_plan, shuffle_backward,
                      shuffle_forward)
from .tensor import RandomSource, read_patch, sample_distinct, uniform_permutation, write_patch

__version__ = "0.1.0"

__all__ = [
    "Milestone", "PatchShuffle", "Phase", "RandomSource", "Schedule", "ShuffleConfig",
    "ShufflePlan", "WholeChannelReverse", "WholeChannelShuffle", "apply_plan", "invert_plan",
    "read_patch", "sample_distinct", "sample_plan", "shuffle_backward", "shuffle_forward",
    "uniform_permutation", "value_at", "write_patch",
]
