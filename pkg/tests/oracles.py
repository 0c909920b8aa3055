"""Independent reference implementations used as test oracles.

These are deliberately written as plain loops over Python floats so they
share no code path with the vectorised library.
"""
import math

import numpy as np

from sssle.autograd import Tensor


class LinearProbe:
    """Toy classifier: logits = (time-summed magnitude) @ W + b."""

    def __init__(self, w, b):
        self.w = np.asarray(w, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def logits(self, mag):
        mag = mag if isinstance(mag, Tensor) else Tensor(mag)
        return mag.sum(axis=2) @ Tensor(self.w) + Tensor(self.b)

    def logits_loop(self, mag):
        f_bins, t_frames = mag.shape
        out = []
        for c in range(self.w.shape[1]):
            z = self.b[c]
            for f in range(f_bins):
                z += self.w[f, c] * sum(mag[f, t] for t in range(t_frames))
            out.append(z)
        return out


def _h(target, logit):
    p = 1.0 / (1.0 + math.exp(-logit))
    return -(target * math.log(p) + (1 - target) * math.log(1 - p))


def baseline_weak_loss(x, masks, y, clf, alpha, threshold=0.01):
    """Batch mean of ``alpha * L_mix + L_cls`` for the time-frequency baseline."""
    total = 0.0
    for b in range(x.shape[0]):
        xb, mb, yb = x[b], masks[b], y[b]
        n_cls, f_bins, t_frames = mb.shape
        energy = [sum(xb[f, t] ** 2 for f in range(f_bins)) for t in range(t_frames)]
        peak = max(energy)
        keep = [0.0 if e < threshold * peak else 1.0 for e in energy]
        t_sal = sum(keep)
        act = inact = 0.0
        for f in range(f_bins):
            for t in range(t_frames):
                ea = xb[f, t] - sum(mb[i, f, t] * xb[f, t] for i in range(n_cls) if yb[i] == 1)
                ei = sum(mb[i, f, t] * xb[f, t] for i in range(n_cls) if yb[i] == 0)
                act += abs(keep[t] * ea)
                inact += abs(keep[t] * ei)
        l_mix = act / (t_sal * f_bins) + inact / (t_sal * f_bins)
        z_mix = clf.logits_loop(xb)
        l_cls = sum(_h(yb[c], z_mix[c]) for c in range(n_cls))
        for i in range(n_cls):
            z_i = clf.logits_loop(mb[i] * xb)
            l_cls += sum(_h(yb[c] if c == i else 0.0, z_i[c]) for c in range(n_cls))
        total += alpha * l_mix + l_cls
    return total / x.shape[0]


def random_fixture(rng, batch=2, n_cls=3, f_bins=6, t_frames=5):
    x = rng.uniform(0.0, 2.0, (batch, f_bins, t_frames))
    # one near-silent frame per clip exercises the salience mask
    x[:, :, 0] *= 0.01
    masks = rng.uniform(0.0, 1.0, (batch, n_cls, f_bins, t_frames))
    y = rng.integers(0, 2, (batch, n_cls)).astype(np.float64)
    clf = LinearProbe(rng.normal(0, 0.1, (f_bins, n_cls)), rng.normal(0, 0.5, n_cls))
    return x, masks, y, clf
