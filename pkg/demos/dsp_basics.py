"""
Spectrograms and levels
=======================

The analysis front end in a few lines. The sqrt-Hann STFT inverts exactly
away from the edges, and two level measures sit on top of it.
"""

import numpy as np

from sssle import dsp

sr = 16000
t = np.arange(2 * sr) / sr
x = 0.5 * np.sin(2 * np.pi * 440 * t) + 0.01 * np.random.default_rng(0).standard_normal(t.size)

# %%
# Forward and inverse transform. Only the interior is fully covered by
# overlapping frames, so that is where the round trip is exact.
cfg = dsp.StftConfig()
spec = dsp.stft(x, cfg)
region = dsp.interior(x.size, cfg)
y = dsp.istft(spec, cfg)
print("frames:", spec.shape[1], "bins:", spec.shape[0])
print("max round-trip error in the interior: %.2e" % np.max(np.abs(y[region] - x[region])))

# %%
# Log-magnitude features are floored at -80 dB and rescaled to [0, 1].
lm = dsp.log_magnitude(spec)
print("log-magnitude range: [%.2f, %.2f]" % (lm.min(), lm.max()))

# %%
# Levels. A full-scale sine sits at -3.01 dBFS; scaling by ten adds 20 dB
# to both measures.
print("dBFS of a full-scale sine: %.4f" % dsp.dbfs(np.sin(2 * np.pi * 1000 * t)))
print("dBFS of x: %.2f, of 10x: %.2f" % (dsp.dbfs(x), dsp.dbfs(10 * x)))
print("LUFS of x: %.2f, of 10x: %.2f" % (dsp.lufs_integrated(x, sr), dsp.lufs_integrated(10 * x, sr)))

# %%
# Loudness normalisation hits a target to within a hundredth of a LU.
z = dsp.lufs_normalize(x, sr, -20.0)
print("normalised loudness: %.3f LUFS" % dsp.lufs_integrated(z, sr))
