"""
Inverted Step Scheduling
========================

The learning rate and the shuffling fraction step down together. Both are
read from one step function, so "from epoch 160" means epoch 160 already
uses the new values.
"""

from shuffleblock.schedule import (cifar_constant_schedule, cifar_is_schedule,
                                   imagenet_is_schedule, validate, value_at)

s = cifar_is_schedule()
print(f"{'epoch':>6} {'lr':>9} {'ch_frac':>8}")
for epoch in (0, 159, 160, 239, 240, 320, 359, 360, 399):
    lr, frac = value_at(s, epoch)
    print(f"{epoch:>6} {lr:>9g} {frac:>8g}")

# a constant fraction is valid but earns a warning: the shuffling never stops
print(validate(cifar_constant_schedule()).warnings)

# on the ImageNet-style schedule the two quantities step at different epochs
s = imagenet_is_schedule()
print([(m.epoch, m.lr, m.ch_frac) for m in s.milestones])
