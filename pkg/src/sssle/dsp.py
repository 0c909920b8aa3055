"""Audio I/O and signal transforms.

STFT/ISTFT with a square-root Hann window, log-magnitude features, masked
reconstruction with the mixture phase, and level measures (RMS dBFS and
gated BS.1770 integrated loudness).

All arrays are 1-D ``float64`` waveforms; a spectrogram is an ``(F, T)``
complex array with ``F = n_fft // 2 + 1``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import lfilter

LEVEL_FLOOR_DB = -120.0


class AudioFormatError(ValueError):
    """Raised for WAV files this toolkit does not accept."""


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 512
    hop: int = 128
    window: str = "sqrt-hann"

    def __post_init__(self):
        if self.n_fft <= 0 or self.n_fft % 2:
            raise ValueError(f"n_fft must be a positive even integer, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must be in (0, n_fft], got {self.hop}")
        if self.window != "sqrt-hann":
            raise ValueError(f"unsupported window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def to_dict(self) -> dict:
        return asdict(self)


def window(cfg: StftConfig) -> np.ndarray:
    """Periodic square-root Hann window of length ``cfg.n_fft``."""
    n = np.arange(cfg.n_fft)
    return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / cfg.n_fft))


def cola_constant(cfg: StftConfig) -> float:
    """Overlap-added ``analysis * synthesis`` window value.

    Raises if the (window, hop) pair does not overlap-add to a constant.
    """
    w2 = window(cfg) ** 2
    acc = np.zeros(cfg.hop)
    for start in range(0, cfg.n_fft, cfg.hop):
        seg = w2[start:start + cfg.hop]
        acc[:len(seg)] += seg
    if np.ptp(acc) > 1e-12 * acc.max():
        raise ValueError(f"window/hop pair {cfg.n_fft}/{cfg.hop} is not COLA")
    return float(acc.mean())


def n_frames(n_samples: int, cfg: StftConfig) -> int:
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Short-time Fourier transform without center padding.

    Every frame lies fully inside the signal, so
    ``T = 1 + (len(x) - n_fft) // hop``.

    Parameters
    ----------
    x : ndarray, shape (N,)
        Waveform.
    cfg : StftConfig

    Returns
    -------
    ndarray, shape (n_fft // 2 + 1, T), complex128
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a 1-D waveform")
    if len(x) < cfg.n_fft:
        raise ValueError(f"input too short: {len(x)} samples < n_fft={cfg.n_fft}")
    t = n_frames(len(x), cfg)
    idx = np.arange(cfg.n_fft)[None, :] + cfg.hop * np.arange(t)[:, None]
    frames = x[idx] * window(cfg)[None, :]
    return np.fft.rfft(frames, axis=1).T


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    The output has ``n_fft + (T - 1) * hop`` samples. Samples inside
    :func:`interior` are exact reconstructions; the edges carry only partial
    window overlap.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] != cfg.n_bins:
        raise ValueError(f"expected spectrogram with {cfg.n_bins} rows, got shape {spec.shape}")
    t = spec.shape[1]
    frames = np.fft.irfft(spec.T, n=cfg.n_fft, axis=1) * window(cfg)[None, :]
    out = np.zeros(cfg.n_fft + (t - 1) * cfg.hop)
    for i in range(t):
        out[i * cfg.hop:i * cfg.hop + cfg.n_fft] += frames[i]
    return out / cola_constant(cfg)


def interior(n_samples: int, cfg: StftConfig = StftConfig()) -> slice:
    """Sample range fully covered by overlapping frames."""
    t = n_frames(n_samples, cfg)
    start = cfg.n_fft - cfg.hop
    stop = t * cfg.hop
    if stop <= start:
        raise ValueError("signal has no fully overlapped interior")
    return slice(start, stop)


def log_magnitude(spec: np.ndarray, floor_db: float = -80.0, rescale: bool = True) -> np.ndarray:
    """Log-magnitude features clamped ``floor_db`` below the clip maximum.

    With ``rescale`` the output is mapped affinely so the floor goes to 0 and
    the clip maximum to (just below) 1. ``spec`` may be complex or an
    already non-negative magnitude array.
    """
    mag = np.abs(spec)
    ref = mag.max() + 1e-10
    floor = ref * 10.0 ** (floor_db / 20.0)
    db = 20.0 * np.log10(np.maximum(mag, floor))
    if not rescale:
        return db
    return (db - 20.0 * np.log10(floor)) / -floor_db


def reconstruct_source(mask: np.ndarray, mix: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Apply a magnitude mask, keep the mixture phase, and invert."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != mix.shape:
        raise ValueError(f"mask shape {mask.shape} != spectrogram shape {mix.shape}")
    return istft(mask * mix, cfg)


def dbfs(x: np.ndarray) -> float:
    """RMS level in dB relative to a full-scale square wave, floored at -120."""
    x = np.asarray(x, dtype=np.float64)
    ms = float(np.mean(x * x)) if x.size else 0.0
    if ms <= 0.0:
        return LEVEL_FLOOR_DB
    return max(10.0 * np.log10(ms), LEVEL_FLOOR_DB)


# K-weighting stage parameters; at 48 kHz these reproduce the BS.1770
# reference biquads to ~1e-12.
_SHELF_F0 = 1681.974450955533
_SHELF_GAIN_DB = 3.999843853973347
_SHELF_Q = 0.7071752369554196
_HP_F0 = 38.13547087602444
_HP_Q = 0.5003270373238773


def k_weighting(sample_rate: int) -> tuple[tuple[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]:
    """Pre-filter (high shelf) and RLB high-pass biquads for ``sample_rate``."""
    if sample_rate <= 2 * _SHELF_F0:
        raise ValueError(f"sample rate {sample_rate} Hz too low for K-weighting")
    k = np.tan(np.pi * _SHELF_F0 / sample_rate)
    vh = 10.0 ** (_SHELF_GAIN_DB / 20.0)
    vb = vh ** 0.4996667741545416
    a0 = 1.0 + k / _SHELF_Q + k * k
    b_shelf = np.array([vh + vb * k / _SHELF_Q + k * k, 2.0 * (k * k - vh), vh - vb * k / _SHELF_Q + k * k]) / a0
    a_shelf = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / _SHELF_Q + k * k) / a0])

    k = np.tan(np.pi * _HP_F0 / sample_rate)
    a0 = 1.0 + k / _HP_Q + k * k
    b_hp = np.array([1.0, -2.0, 1.0])
    a_hp = np.array([1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / _HP_Q + k * k) / a0])
    return (b_shelf, a_shelf), (b_hp, a_hp)


def _block_powers(x: np.ndarray, sample_rate: int) -> np.ndarray:
    (b1, a1), (b2, a2) = k_weighting(sample_rate)
    y = lfilter(b2, a2, lfilter(b1, a1, x))
    block = int(round(0.4 * sample_rate))
    step = int(round(0.1 * sample_rate))
    if len(y) < block:
        raise ValueError(f"too short for gating: {len(y)} samples < one 400 ms block")
    nb = 1 + (len(y) - block) // step
    csum = np.concatenate([[0.0], np.cumsum(y * y)])
    starts = step * np.arange(nb)
    return (csum[starts + block] - csum[starts]) / block


def lufs_integrated(x: np.ndarray, sample_rate: int) -> float:
    """Gated integrated loudness (mono) in LUFS.

    K-weighted 400 ms blocks with 75 % overlap, an absolute gate at -70 LUFS
    and a relative gate 10 LU below the absolutely gated loudness. Returns
    -120 when nothing survives the gates.
    """
    x = np.asarray(x, dtype=np.float64)
    z = _block_powers(x, sample_rate)
    with np.errstate(divide="ignore"):
        lk = -0.691 + 10.0 * np.log10(z)
    z_abs = z[lk > -70.0]
    if z_abs.size == 0:
        return LEVEL_FLOOR_DB
    rel_gate = -0.691 + 10.0 * np.log10(z_abs.mean()) - 10.0
    gated = z[(lk > -70.0) & (lk > rel_gate)]
    return max(-0.691 + 10.0 * np.log10(gated.mean()), LEVEL_FLOOR_DB)


def lufs_normalize(x: np.ndarray, sample_rate: int, target: float, tol: float = 0.01) -> np.ndarray:
    """Scale ``x`` so its integrated loudness equals ``target`` LUFS."""
    x = np.asarray(x, dtype=np.float64)
    gain = 1.0
    # a gain change can move blocks across the absolute gate; re-measure
    for _ in range(10):
        level = lufs_integrated(gain * x, sample_rate)
        if level <= LEVEL_FLOOR_DB:
            raise ValueError("cannot normalize silence")
        if abs(level - target) < tol:
            break
        gain *= 10.0 ** ((target - level) / 20.0)
    return gain * x


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a mono PCM16 or float32 WAV as ``float64`` samples."""
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0, int(rate)
    if data.dtype == np.float32:
        return data.astype(np.float64), int(rate)
    raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path: str | Path, x: np.ndarray, sample_rate: int, subtype: str = "float32") -> None:
    """Write a mono WAV; ``subtype`` is ``"float32"`` or ``"pcm16"``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise AudioFormatError("only mono waveforms can be written")
    if subtype == "float32":
        data = x.astype(np.float32)
    elif subtype == "pcm16":
        data = np.round(np.clip(x, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    wavfile.write(str(path), int(sample_rate), data)
