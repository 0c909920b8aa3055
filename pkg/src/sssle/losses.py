"""Training objectives for weakly supervised source-level estimation.

Shapes follow one convention throughout: mixture magnitudes ``X`` are
``(B, F, T)``, masks ``(B, C, F, T)``, clip labels ``y`` are ``(B, C)``.
Unbatched inputs (``(F, T)``, ``(C, F, T)``, ``(C,)``) are promoted to a
batch of one. Batch losses are the mean of per-clip losses in clip order.

Every loss accepts plain arrays or :class:`~sssle.autograd.Tensor` masks
and returns a scalar ``Tensor``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
from scipy.special import xlogy

from .autograd import Tensor, as_tensor, concat
from .tfagg import AggregationSet, AggregationSpec, FilterBank, apply_aggregation, build_set

DIVISORS = ("aggregated", "original")


@dataclass(frozen=True)
class LossConfig:
    """Weights and margins of the combined objective.

    ``epsilon`` maps aggregation names to per-bin margins; missing names
    get 0. ``divisor`` picks the normaliser of each aggregated term:
    ``"aggregated"`` divides by the aggregated bin count, ``"original"`` by
    ``F_fb`` times the number of salient frames for every resolution.
    """
    aggregation: AggregationSet
    alpha: float = 100.0
    beta: int = 1
    epsilon: Mapping[str, float] = field(default_factory=dict)
    salience_threshold: float = 0.01
    divisor: str = "aggregated"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.beta not in (0, 1):
            raise ValueError("beta must be 0 or 1")
        if not 0.0 < self.salience_threshold < 1.0:
            raise ValueError("salience_threshold must be in (0, 1)")
        if any(v < 0 for v in self.epsilon.values()):
            raise ValueError("epsilon margins must be nonnegative")
        unknown = set(self.epsilon) - set(self.aggregation.names)
        if unknown:
            raise ValueError(f"epsilon given for aggregations not in the set: {sorted(unknown)}")
        if self.divisor not in DIVISORS:
            raise ValueError(f"divisor must be one of {DIVISORS}")

    def eps(self, name: str) -> float:
        return float(self.epsilon.get(name, 0.0))


def _batch(x, ndim: int):
    if isinstance(x, Tensor):
        return x if x.ndim == ndim + 1 else x.reshape((1,) + x.shape)
    x = np.asarray(x, dtype=np.float64)
    return x if x.ndim == ndim + 1 else x[None]


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("class presence labels must be 0 or 1")
    return y


# -- salience -----------------------------------------------------------------

def salience_frames(x: np.ndarray, threshold: float = 0.01) -> np.ndarray:
    """Boolean ``(..., T)`` array of frames at or above ``threshold`` of the peak frame energy."""
    x = np.asarray(x, dtype=np.float64)
    energy = np.sum(x * x, axis=-2)
    peak = energy.max(axis=-1, keepdims=True)
    if np.any(peak <= 0):
        raise ValueError("no salient frames: spectrogram is all zero")
    return ~(energy < threshold * peak)


def salience_mask(x: np.ndarray, threshold: float = 0.01) -> tuple[np.ndarray, int]:
    """Binary frame mask over an ``(F, T)`` magnitude spectrogram.

    Frames whose energy ``sum_f X[f, t]**2`` is strictly below ``threshold``
    times the maximum frame energy are zeroed.

    Returns
    -------
    mask : ndarray, shape (F, T)
        1.0 on salient frames, 0.0 elsewhere.
    n_salient : int
        Number of salient frames; the time normaliser of every loss.
    """
    x = np.asarray(x, dtype=np.float64)
    keep = salience_frames(x, threshold)
    mask = np.broadcast_to(keep[None, :], x.shape).astype(np.float64)
    return mask, int(keep.sum())


def n_bins(spec: AggregationSpec, n_salient, divisor: str = "aggregated"):
    """Normalising bin count of ``spec`` for clips with ``n_salient`` frames."""
    n_salient = np.asarray(n_salient, dtype=np.float64)
    if divisor == "original":
        return spec.filter_bank.n_bands * n_salient
    f_out, _ = spec.out_shape(1)
    return f_out * (np.ones_like(n_salient) if spec.time_agg == "sum" else n_salient)


# -- norms ----------------------------------------------------------------------

def asym_l1(e, eps: float, n_bins) -> Tensor:
    """Asymmetric margin norm over the last two axes.

    ``[ ||[E]_+||_1 - n_bins * eps ]_+ + ||[-E]_+||_1``: overestimation up to
    ``eps`` per bin is free, underestimation is always charged.
    """
    e = as_tensor(e)
    pos = e.relu().sum(axis=(-2, -1)) if e.ndim >= 2 else e.relu().sum()
    neg = (-e).relu().sum(axis=(-2, -1)) if e.ndim >= 2 else (-e).relu().sum()
    return (pos - np.asarray(n_bins, dtype=np.float64) * eps).relu() + neg


def l1(e) -> Tensor:
    e = as_tensor(e)
    return e.relu().sum(axis=(-2, -1)) + (-e).relu().sum(axis=(-2, -1))


# -- energy errors --------------------------------------------------------------

def source_estimates(x, masks) -> Tensor:
    x = _batch(x, 2)
    masks = as_tensor(_batch(masks, 3))
    return masks * Tensor(x[:, None])


def active_error(x, masks, y) -> Tensor:
    """``X - sum of masked estimates over active classes``."""
    x = _batch(x, 2)
    y = _check_labels(_batch(y, 1))
    s = source_estimates(x, masks)
    return Tensor(x) - (s * y[:, :, None, None]).sum(axis=1)


def inactive_error(x, masks, y) -> Tensor:
    """Sum of masked estimates over inactive classes."""
    x = _batch(x, 2)
    y = _check_labels(_batch(y, 1))
    s = source_estimates(x, masks)
    return (s * (1.0 - y)[:, :, None, None]).sum(axis=1)


def residual_spectrogram(x, masks) -> Tensor:
    """``[1 - sum_i M_i]_+ * X``: what no class claims."""
    x = _batch(x, 2)
    masks = as_tensor(_batch(masks, 3))
    return (1.0 - masks.sum(axis=1)).relu() * Tensor(x)


# -- mixture consistency --------------------------------------------------------

def mix_loss_per_clip(x, masks, y, cfg: LossConfig) -> Tensor:
    x = _batch(x, 2)
    keep = salience_frames(x, cfg.salience_threshold)
    count = keep.sum(axis=-1)
    me = keep[:, None, :].astype(np.float64)
    e_act = active_error(x, masks, y) * me
    e_inact = inactive_error(x, masks, y) * me
    total = None
    for spec in cfg.aggregation:
        n = n_bins(spec, count, cfg.divisor)
        term = (asym_l1(apply_aggregation(spec, e_act), cfg.eps(spec.name), n)
                + l1(apply_aggregation(spec, e_inact))) * (1.0 / n)
        total = term if total is None else total + term
    return total * (1.0 / len(cfg.aggregation))


def mix_loss_sssle(x, masks, y, cfg: LossConfig) -> Tensor:
    """Mean energy consistency over the aggregation set, batch-averaged."""
    return mix_loss_per_clip(x, masks, y, cfg).mean()


# -- classification -------------------------------------------------------------

def bce(target, prediction) -> np.ndarray:
    """Binary cross-entropy on probabilities (elementwise)."""
    t = _check_labels(target)
    p = np.asarray(prediction, dtype=np.float64)
    return -(xlogy(t, p) + xlogy(1.0 - t, 1.0 - p))


def bce_with_logits(target, logits) -> Tensor:
    """Elementwise ``H(target, sigmoid(logits))``, stable for any logit."""
    t = _check_labels(target)
    z = as_tensor(logits)
    return z.softplus() - z * t


def cls_loss_per_clip(clf, x, sources, bkgr, y, beta: int) -> Tensor:
    # clf: anything with logits(mag (N, F, T)) -> (N, C)
    x = _batch(x, 2)
    y = _check_labels(_batch(y, 1))
    sources = as_tensor(_batch(sources, 3))
    bkgr = as_tensor(_batch(bkgr, 2))
    b, c = y.shape
    f, t = x.shape[1:]
    if sources.shape[1] != c:
        raise ValueError(f"{sources.shape[1]} source estimates for {c} classes")
    parts = [Tensor(x[:, None]), sources]
    if beta:
        parts.append(bkgr.reshape(b, 1, f, t))
    inputs = concat(parts, axis=1)
    k = inputs.shape[1]
    logits = clf.logits(inputs.reshape(b * k, f, t))
    if logits.shape[-1] != c:
        raise ValueError(f"classifier emits {logits.shape[-1]} classes, labels have {c}")
    logits = logits.reshape(b, k, c)
    targets = np.zeros((b, k, c))
    targets[:, 0] = y
    targets[:, 1:c + 1] = y[:, :, None] * np.eye(c)[None]
    # rows past c + 1 (the residual) keep all-zero targets
    return bce_with_logits(targets, logits).sum(axis=(1, 2))


def cls_loss_sssle(clf, x, sources, bkgr, y, beta: int = 1) -> Tensor:
    """Mixture, per-source and (``beta=1``) residual-background BCE, summed over classes."""
    return cls_loss_per_clip(clf, x, sources, bkgr, y, beta).mean()


def total_loss(x, masks, y, clf, cfg: LossConfig) -> Tensor:
    """``alpha * mix_loss_sssle + cls_loss_sssle``, batch-averaged.

    Gradients reach whatever in ``masks`` requires them; the classifier is
    treated as fixed unless its own parameters require gradients.
    """
    x = _batch(x, 2)
    masks = as_tensor(_batch(masks, 3))
    mix = mix_loss_per_clip(x, masks, y, cfg)
    sources = source_estimates(x, masks)
    bkgr = residual_spectrogram(x, masks)
    cls = cls_loss_per_clip(clf, x, sources, bkgr, y, cfg.beta)
    return (mix * cfg.alpha + cls).mean()


# -- margins --------------------------------------------------------------------

@dataclass
class MarginClip:
    """One training clip as seen by :func:`estimate_epsilon`.

    ``stems`` are per-class magnitude spectrograms ``(C, F, T)``;
    ``background`` is a background-only magnitude spectrogram.
    """
    mixture: np.ndarray
    labels: np.ndarray
    stems: np.ndarray | None = None
    background: np.ndarray | None = None


class MarginSourceError(ValueError):
    pass


def estimate_epsilon(clips: Iterable[MarginClip], spec: AggregationSpec,
                     threshold: float = 0.01, divisor: str = "aggregated") -> float:
    """Mean positive aggregated margin per bin between mixtures and active stems.

    Uses stems when every clip has them, else background-only references.
    """
    values = []
    for clip in clips:
        if clip.stems is not None:
            x = np.asarray(clip.mixture, dtype=np.float64)
            y = _check_labels(clip.labels)
            resid = x - np.tensordot(y, clip.stems, axes=1)
        elif clip.background is not None:
            x = resid = np.asarray(clip.background, dtype=np.float64)
            if not np.any(x):
                values.append(0.0)
                continue
        else:
            raise MarginSourceError(
                "cannot estimate epsilon: clips carry neither stems nor background references; "
                "pass an explicit --epsilon")
        keep = salience_frames(x, threshold)
        h = apply_aggregation(spec, resid * keep[None, :])
        values.append(np.maximum(h, 0.0).sum() / n_bins(spec, keep.sum(), divisor))
    if not values:
        raise MarginSourceError("cannot estimate epsilon from an empty clip list")
    return float(np.mean(values))


def estimate_epsilons(clips, aggregation: AggregationSet, threshold: float = 0.01,
                      divisor: str = "aggregated") -> dict[str, float]:
    clips = list(clips)
    return {spec.name: estimate_epsilon(clips, spec, threshold, divisor) for spec in aggregation}


# -- ablation grid --------------------------------------------------------------

def loudness_ablation_names() -> list[tuple[str, ...]]:
    """Every nonempty subset of {tf, spectrum, global} on mel and linear bands."""
    out = []
    for bank in ("mel", "linear"):
        for r in range(1, 4):
            for subset in itertools.combinations(("tf", "spectrum", "global"), r):
                names = tuple("global" if s == "global" else f"{s}-{bank}" for s in subset)
                if names not in out:
                    out.append(names)
    return out


def ablation_grid(mel_bank: FilterBank, linear_bank: FilterBank, base: LossConfig,
                  epsilon: Mapping[str, float] | None = None) -> dict[str, LossConfig]:
    """Named loss configurations for the sound-level and background ablations.

    Sound-level variants drop margins and residual classification; background
    variants use the full mel set and toggle margin (``epsilon``) and
    residual classification (``beta``) independently.
    """
    epsilon = dict(epsilon or {})
    grid = {}
    for names in loudness_ablation_names():
        agg = build_set(names, mel_bank, linear_bank)
        grid["level:" + "+".join(names)] = replace(base, aggregation=agg, epsilon={}, beta=0)
    full = build_set(("tf-mel", "spectrum-mel", "global"), mel_bank, linear_bank)
    eps_full = {k: v for k, v in epsilon.items() if k in full.names}
    for margin, beta in itertools.product((True, False), (1, 0)):
        grid[f"background:margin={int(margin)},residual={beta}"] = replace(
            base, aggregation=full, epsilon=eps_full if margin else {}, beta=beta)
    return grid

