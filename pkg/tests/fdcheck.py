"""Central finite-difference gradient checks shared by the test modules."""
import numpy as np

H = 1e-5


def rel_error(analytic, numeric, floor=1e-8):
    """``|a - n| / max(|a|, |n|, floor)``, elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, x, index, h=H):
    """d f / d x[index] by central differences; ``x`` is restored afterwards."""
    orig = x[index]
    x[index] = orig + h
    up = f()
    x[index] = orig - h
    down = f()
    x[index] = orig
    return (up - down) / (2 * h)


def check_params(loss_fn, params, grads, n_probe, rng, h=H):
    """Probe ``n_probe`` coordinates drawn uniformly from all of ``params``.

    ``loss_fn()`` evaluates the scalar loss from the current contents of
    ``params`` (a dict of arrays mutated in place); ``grads`` holds the
    analytic gradients. Returns the worst relative error and the number of
    coordinates probed.
    """
    coords = [(name, i) for name in sorted(params) for i in range(params[name].size)]
    picks = rng.choice(len(coords), size=min(n_probe, len(coords)), replace=False)
    worst = 0.0
    for j in picks:
        name, i = coords[j]
        num = central_difference(loss_fn, params[name].reshape(-1), i, h)
        worst = max(worst, float(rel_error(grads[name].reshape(-1)[i], num)))
    return worst, len(picks)
