"""
Mixture consistency with a background margin
============================================

Masks that recover every source exactly still leave the background behind,
so a plain L1 consistency term keeps charging them. The asymmetric margin
forgives up to ``eps`` per aggregated bin of overestimation. This demo walks
a small constructed example through each aggregation.
"""

import numpy as np

from sssle import losses, tfagg

F, T = 9, 8
mel, lin = tfagg.mel_filterbank(16, 4, 8000), tfagg.linear_filterbank(16)

# two sources on alternating bins, 0.75 each, under a flat 0.25 background
owner = np.arange(F * T).reshape(F, T) % 2
x = np.ones((F, T))
masks = np.stack([(owner == 0) * 0.75, (owner == 1) * 0.75, np.zeros((F, T))])
y = np.array([1.0, 1.0, 0.0])

# %%
# Without a margin every aggregation sees the leftover background.
for name in tfagg.AGGREGATION_NAMES:
    cfg = losses.LossConfig(tfagg.build_set([name], mel, lin))
    print("%-16s loss without margin %.4f" % (name, losses.mix_loss_sssle(x, masks, y, cfg).item()))

# %%
# The estimated margin is the mean positive residual per aggregated bin.
# With it the oracle masks cost nothing; just below it they do.
clip = losses.MarginClip(x, y[:2], stems=x * masks[:2])
for spec in tfagg.build_set(tfagg.AGGREGATION_NAMES, mel, lin):
    eps = losses.estimate_epsilon([clip], spec)
    agg = tfagg.AggregationSet((spec,))
    at = losses.mix_loss_sssle(x, masks, y, losses.LossConfig(agg, epsilon={spec.name: eps})).item()
    below = losses.mix_loss_sssle(x, masks, y, losses.LossConfig(agg, epsilon={spec.name: 0.99 * eps})).item()
    print("%-16s eps %.4f   loss at eps %.2e   at 0.99 eps %.2e" % (spec.name, eps, at, below))

# %%
# The grid used for ablations: every loudness subset on both filter banks,
# then margin and residual classification toggled on the full mel set.
grid = losses.ablation_grid(mel, lin, losses.LossConfig(tfagg.standard_set(mel, lin)))
for name in grid:
    print(name)
