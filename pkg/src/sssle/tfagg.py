"""Time-frequency aggregation of energy-error matrices.

An aggregation spec maps an ``(F, T)`` matrix ``E`` to ``B_L @ A @ E @ B_R``
where ``A`` is a filter bank and ``B_L``/``B_R`` either keep or sum the
frequency/time axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor

AGGREGATION_NAMES = ("tf-mel", "tf-linear", "spectrum-mel", "spectrum-linear", "global")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@dataclass(frozen=True, eq=False)
class FilterBank:
    matrix: np.ndarray
    kind: str

    @property
    def n_bands(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.matrix.shape[1]


def linear_filterbank(n_fft: int) -> FilterBank:
    return FilterBank(np.eye(n_fft // 2 + 1), "linear")


def mel_filterbank(n_fft: int, n_bands: int, sample_rate: int) -> FilterBank:
    """HTK-style triangular mel filters with unit peaks.

    Band edges are ``n_bands + 2`` points uniformly spaced in mel between
    0 Hz and Nyquist; the result has shape ``(n_bands, n_fft // 2 + 1)``.
    """
    if n_fft % 2:
        raise ValueError("n_fft must be even")
    n_bins = n_fft // 2 + 1
    if n_bands < 2:
        raise ValueError("need at least 2 mel bands")
    if n_bands > n_bins:
        raise ValueError(f"{n_bands} mel bands exceed {n_bins} frequency bins")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_bands + 2))
    freqs = np.arange(n_bins) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (mid - lo)
    falling = (hi - freqs[None, :]) / (hi - mid)
    mat = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(mat.max(axis=1) <= 0.0)
    if empty.size:
        raise ValueError(f"mel bands {empty.tolist()} cover no FFT bin; use fewer bands or a larger n_fft")
    return FilterBank(mat, "mel")


@dataclass(frozen=True, eq=False)
class AggregationSpec:
    name: str
    filter_bank: FilterBank
    freq_agg: str = "identity"
    time_agg: str = "identity"

    def __post_init__(self):
        if self.freq_agg not in ("identity", "sum") or self.time_agg not in ("identity", "sum"):
            raise ValueError("aggregators must be 'identity' or 'sum'")
        if self.freq_agg == "sum" and self.time_agg == "sum" and self.filter_bank.kind != "linear":
            raise ValueError("global aggregation always uses the linear filter bank")

    def out_shape(self, n_frames: int) -> tuple[int, int]:
        f = 1 if self.freq_agg == "sum" else self.filter_bank.n_bands
        t = 1 if self.time_agg == "sum" else n_frames
        return f, t


def apply_aggregation(spec: AggregationSpec, e):
    """Compute ``B_L A E B_R`` on the last two axes of ``e``.

    Works on plain arrays and on :class:`~sssle.autograd.Tensor` inputs,
    with any number of leading batch axes.
    """
    is_tensor = isinstance(e, Tensor)
    shape = e.shape
    if shape[-2] != spec.filter_bank.n_inputs:
        raise ValueError(f"expected {spec.filter_bank.n_inputs} frequency rows, got {shape[-2]}")
    out = e
    if spec.filter_bank.kind != "linear":
        a = spec.filter_bank.matrix
        out = Tensor(a) @ out if is_tensor else a @ out
    if spec.freq_agg == "sum":
        ones = np.ones((1, out.shape[-2]))
        out = Tensor(ones) @ out if is_tensor else ones @ out
    if spec.time_agg == "sum":
        ones = np.ones((out.shape[-1], 1))
        out = out @ Tensor(ones) if is_tensor else out @ ones
    return out


@dataclass(frozen=True, eq=False)
class AggregationSet:
    specs: tuple[AggregationSpec, ...]

    def __post_init__(self):
        if not self.specs:
            raise ValueError("aggregation set must be nonempty")
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate aggregation names in {names}")

    def __iter__(self):
        return iter(self.specs)

    def __len__(self):
        return len(self.specs)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]


def make_spec(name: str, mel_bank: FilterBank, linear_bank: FilterBank) -> AggregationSpec:
    if name not in AGGREGATION_NAMES:
        raise ValueError(f"unknown aggregation {name!r}; expected one of {AGGREGATION_NAMES}")
    if name == "global":
        return AggregationSpec(name, linear_bank, "sum", "sum")
    resolution, bank = name.split("-")
    fb = mel_bank if bank == "mel" else linear_bank
    return AggregationSpec(name, fb, "identity", "sum" if resolution == "spectrum" else "identity")


def build_set(names, mel_bank: FilterBank, linear_bank: FilterBank) -> AggregationSet:
    return AggregationSet(tuple(make_spec(n, mel_bank, linear_bank) for n in names))


def standard_set(mel_bank: FilterBank, linear_bank: FilterBank) -> AggregationSet:
    """Time-frequency and spectrum consistency on mel bands plus global energy."""
    return build_set(("tf-mel", "spectrum-mel", "global"), mel_bank, linear_bank)
