"""Synthetic soundscapes with clip-level labels.

Events are placed by a zero-truncated Poisson count with uniform class,
stem and start time; an optional background segment is LUFS-normalised and
added. Clips are generated from a per-clip RNG seeded by ``(seed, index)``
so any clip can be regenerated in isolation.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp

BUILTIN_CLASSES = ("tone_stack", "am_tone", "chirp", "noise_burst", "click_train")

# Design ranges for the power-weighted spectral centroid of each template (Hz).
CENTROID_RANGES = {
    "tone_stack": (150.0, 400.0),
    "am_tone": (450.0, 750.0),
    "chirp": (1000.0, 1500.0),
    "noise_burst": (1750.0, 2450.0),
    "click_train": (2700.0, 3600.0),
}

FADE_S = 0.01
# stems and backgrounds are snapped to this grid so that sums of them are
# exact in float32 and float64 in any order, as long as |mixture| < 16
QUANTUM = 2.0 ** -20
EXACT_LIMIT = 16.0


class SceneError(ValueError):
    pass


@dataclass
class SceneConfig:
    classes: Sequence[str] = BUILTIN_CLASSES
    duration_s: float = 4.0
    sample_rate: int = 16000
    lam: float = 5.0
    # LUFS targets; None means no background for that clip
    background_levels: Sequence[float | None] = (None,)
    seed: int = 0

    def __post_init__(self):
        if self.duration_s <= 0:
            raise SceneError("duration must be positive")
        if self.lam <= 0:
            raise SceneError("lambda must be positive")
        if not self.classes:
            raise SceneError("at least one class is required")
        if not self.background_levels:
            raise SceneError("background_levels must list at least one level or None")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate))


@dataclass
class Soundscape:
    mixture: np.ndarray
    stems: np.ndarray          # (C, N), zero rows for absent classes
    background: np.ndarray | None
    background_lufs: float | None
    labels: np.ndarray         # (C,) of 0/1
    events: list[dict] = field(default_factory=list)
    seed: tuple = ()


# -- event counts --------------------------------------------------------------

def sample_event_count(rng: np.random.Generator, lam: float) -> int:
    """One draw from Poisson(``lam``) conditioned on being at least 1."""
    return int(sample_event_counts(rng, lam, 1)[0])


def sample_event_counts(rng: np.random.Generator, lam: float, size: int) -> np.ndarray:
    if lam <= 0:
        raise ValueError("lambda must be positive")
    out = rng.poisson(lam, size)
    bad = np.flatnonzero(out == 0)
    while bad.size:
        out[bad] = rng.poisson(lam, bad.size)
        bad = bad[out[bad] == 0]
    return out


def ztp_mean(lam: float) -> float:
    return lam / (1.0 - np.exp(-lam))


# -- built-in stems ------------------------------------------------------------

def _fades(x: np.ndarray, sample_rate: int, fade_in: bool = True) -> np.ndarray:
    n = min(int(round(FADE_S * sample_rate)), len(x) // 2)
    if n == 0:
        return x
    ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(n) / n)
    x = x.copy()
    if fade_in:
        x[:n] *= ramp
    x[-n:] *= ramp[::-1]
    return x


def builtin_stem_generator(class_spec: str, rng: np.random.Generator, sample_rate: int = 16000) -> np.ndarray:
    """Generate one stem of a built-in class template.

    Stems last 0.2 to 2.0 s, are peak-normalised to 0.5 and carry 10 ms
    raised-cosine fades. Each template draws its pitch or band from a
    class-specific range (see ``CENTROID_RANGES``).
    """
    if class_spec not in BUILTIN_CLASSES:
        raise SceneError(f"unknown built-in class template {class_spec!r}")
    if sample_rate < 8000:
        raise SceneError("built-in stems need a sample rate of at least 8 kHz")
    dur = rng.uniform(0.2, 2.0)
    n = int(round(dur * sample_rate))
    t = np.arange(n) / sample_rate
    if class_spec == "tone_stack":
        f0 = rng.uniform(140.0, 220.0)
        phases = rng.uniform(0, 2 * np.pi, 4)
        x = sum(np.sin(2 * np.pi * k * f0 * t + phases[k - 1]) / k for k in range(1, 5))
    elif class_spec == "am_tone":
        fc = rng.uniform(500.0, 700.0)
        rate = rng.uniform(4.0, 12.0)
        x = (1.0 + 0.8 * np.sin(2 * np.pi * rate * t)) * np.sin(2 * np.pi * fc * t + rng.uniform(0, 2 * np.pi))
    elif class_spec == "chirp":
        f_start = rng.uniform(1000.0, 1200.0)
        sweep = 300.0 if rng.random() < 0.5 else -300.0
        f_start = f_start if sweep > 0 else f_start + 300.0
        phase = 2 * np.pi * (f_start * t + 0.5 * sweep / dur * t * t)
        x = np.sin(phase)
    elif class_spec == "noise_burst":
        center = rng.uniform(1950.0, 2250.0)
        spec = np.fft.rfft(rng.standard_normal(n))
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spec[np.abs(freqs - center) > 150.0] = 0.0
        x = np.fft.irfft(spec, n)
    else:  # click_train
        fr = rng.uniform(2900.0, 3300.0)
        rate = rng.uniform(8.0, 20.0)
        tau = 0.005
        click_len = min(n, int(round(6 * tau * sample_rate)))
        tc = np.arange(click_len) / sample_rate
        click = np.exp(-tc / tau) * np.sin(2 * np.pi * fr * tc)
        x = np.zeros(n)
        for start in np.arange(0.0, dur, 1.0 / rate):
            i = int(round(start * sample_rate))
            seg = click[:n - i]
            x[i:i + len(seg)] += seg
    x = _fades(np.asarray(x, dtype=np.float64), sample_rate)
    return 0.5 * x / np.max(np.abs(x))


def builtin_background(rng: np.random.Generator, sample_rate: int, duration_s: float) -> np.ndarray:
    """Broadband coloured noise with a random spectral tilt and slow level drift."""
    n = int(round(duration_s * sample_rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    tilt = rng.uniform(0.5, 1.5)
    spec *= 1.0 / np.maximum(freqs, 20.0) ** (tilt / 2.0)
    x = np.fft.irfft(spec, n)
    drift = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * np.arange(n) / sample_rate
                               + rng.uniform(0, 2 * np.pi))
    x = x * drift
    return 0.5 * x / np.max(np.abs(x))


def spectral_centroid(x: np.ndarray, sample_rate: int) -> float:
    p = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    return float(np.sum(f * p) / np.sum(p))


def _split_seed(seed: int, *keys) -> np.random.SeedSequence:
    words = [int(seed)] + [zlib.crc32(str(k).encode()) for k in keys]
    return np.random.SeedSequence(words)


def builtin_pools(classes: Sequence[str], sample_rate: int, split: str, seed: int,
                  per_class: int = 40, n_backgrounds: int = 12,
                  background_s: float = 6.0) -> tuple[dict[str, list[np.ndarray]], list[np.ndarray]]:
    """Per-split stem and background pools; different splits never share material."""
    templates = [c if c in BUILTIN_CLASSES else BUILTIN_CLASSES[i % len(BUILTIN_CLASSES)]
                 for i, c in enumerate(classes)]
    stems = {}
    for name, template in zip(classes, templates):
        rng = np.random.default_rng(_split_seed(seed, split, "stems", name))
        stems[name] = [builtin_stem_generator(template, rng, sample_rate) for _ in range(per_class)]
    rng = np.random.default_rng(_split_seed(seed, split, "backgrounds"))
    bgs = [builtin_background(rng, sample_rate, background_s) for _ in range(n_backgrounds)]
    return stems, bgs


def pool_paths(stems_dir: str | Path | None, backgrounds_dir: str | Path | None, split: str,
               classes: Sequence[str]) -> dict:
    """List pool WAVs without reading them, preferring ``<dir>/<split>/`` partitions.

    Stems live at ``<stems_dir>[/<split>]/<class>/*.wav`` and backgrounds at
    ``<backgrounds_dir>[/<split>]/*.wav``.
    """
    def root_for(base):
        base = Path(base)
        return base / split if (base / split).is_dir() else base

    paths = {"stems": {}, "backgrounds": []}
    if stems_dir is not None:
        root = root_for(stems_dir)
        paths["stems"] = {name: sorted(str(p) for p in (root / name).glob("*.wav")) for name in classes}
    if backgrounds_dir is not None:
        paths["backgrounds"] = sorted(str(p) for p in root_for(backgrounds_dir).glob("*.wav"))
    return paths


def load_pools(stems_dir: str | Path | None, backgrounds_dir: str | Path | None, split: str,
               classes: Sequence[str], sample_rate: int):
    """Read user stem/background WAVs; see :func:`pool_paths` for the layout."""
    paths = pool_paths(stems_dir, backgrounds_dir, split, classes)
    stems = None if stems_dir is None else {
        name: [_read_mono(p, sample_rate) for p in files] for name, files in paths["stems"].items()}
    bgs = None if backgrounds_dir is None else [_read_mono(p, sample_rate) for p in paths["backgrounds"]]
    return stems, bgs, paths


def check_disjoint(pool_paths: dict[str, dict]) -> None:
    """Raise if any stem or background file is shared between splits."""
    seen: dict[str, str] = {}
    for split, paths in pool_paths.items():
        files = [p for plist in paths.get("stems", {}).values() for p in plist] + list(paths.get("backgrounds", []))
        for p in files:
            key = str(Path(p).resolve())
            if key in seen and seen[key] != split:
                raise SceneError(f"{p} is used by both {seen[key]!r} and {split!r} splits")
            seen[key] = split


def _read_mono(path, sample_rate: int) -> np.ndarray:
    x, rate = dsp.read_wav(path)
    if rate != sample_rate:
        raise SceneError(f"{path}: sample rate {rate} != configured {sample_rate} (no resampling)")
    return x


# -- synthesis -----------------------------------------------------------------

def synthesize_scape(stems_pool: dict[str, list[np.ndarray]], backgrounds_pool: Sequence[np.ndarray] | None,
                     cfg: SceneConfig, rng: np.random.Generator) -> Soundscape:
    """Draw one soundscape.

    Foreground draws come first so that, for a fixed RNG state, the events
    do not depend on which background level is chosen.
    """
    n = cfg.n_samples
    classes = list(cfg.classes)
    stems = np.zeros((len(classes), n))
    events = []
    for _ in range(sample_event_count(rng, cfg.lam)):
        ci = int(rng.integers(len(classes)))
        pool = stems_pool.get(classes[ci]) or []
        if not pool:
            raise SceneError(f"no stems available for class {classes[ci]!r}")
        si = int(rng.integers(len(pool)))
        stem = pool[si]
        if len(stem) >= n:
            start = 0
            stem = _fades(stem[:n], cfg.sample_rate, fade_in=False)
        else:
            start = int(rng.integers(0, n - len(stem) + 1))
        stems[ci, start:start + len(stem)] += stem
        events.append({"class": classes[ci], "start_s": start / cfg.sample_rate, "stem": si, "gain": 1.0})

    level = cfg.background_levels[int(rng.integers(len(cfg.background_levels)))]
    background = None
    if level is not None:
        if not backgrounds_pool:
            raise SceneError("a background level was requested but the background pool is empty")
        bi = int(rng.integers(len(backgrounds_pool)))
        clip = backgrounds_pool[bi]
        if len(clip) < n:
            raise SceneError(f"background clip {bi} is shorter than the scene ({len(clip)} < {n} samples)")
        offset = int(rng.integers(0, len(clip) - n + 1))
        background = quantize(dsp.lufs_normalize(clip[offset:offset + n], cfg.sample_rate, float(level)))

    stems = quantize(stems)
    mixture = stems.sum(axis=0)
    if background is not None:
        mixture = mixture + background
    if np.max(np.abs(mixture)) >= EXACT_LIMIT:
        raise SceneError("mixture peak exceeds the exact-additivity range; lower the stem gains")
    labels = (np.sum(stems * stems, axis=1) > 0).astype(np.int64)
    return Soundscape(mixture, stems, background, None if level is None else float(level), labels, events)


def quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(x, dtype=np.float64) / QUANTUM) * QUANTUM


def clip_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def generate(cfg: SceneConfig, count: int, stems_pool, backgrounds_pool, offset: int = 0) -> list[Soundscape]:
    out = []
    for i in range(offset, offset + count):
        scape = synthesize_scape(stems_pool, backgrounds_pool, cfg, clip_rng(cfg.seed, i))
        scape.seed = (cfg.seed, i)
        out.append(scape)
    return out


# -- manifests -----------------------------------------------------------------

class ManifestError(ValueError):
    pass


@dataclass
class ManifestRecord:
    clip_id: str
    mixture: str
    stems: dict[str, str | None]
    labels: dict[str, int]
    background: dict | None
    sample_rate: int
    duration_s: float
    seed: int

    def to_dict(self) -> dict:
        return {"clip_id": self.clip_id, "mixture": self.mixture, "stems": self.stems,
                "labels": self.labels, "background": self.background,
                "sample_rate": self.sample_rate, "duration_s": self.duration_s, "seed": self.seed}


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path

    @property
    def classes(self) -> list[str]:
        return list(self.records[0].labels) if self.records else []

    def path(self, rel: str) -> Path:
        return self.root / rel

    def __len__(self):
        return len(self.records)


def write_dataset(scapes: Sequence[Soundscape], cfg: SceneConfig, out_dir: str | Path,
                  prefix: str = "clip", manifest_name: str = "manifest.jsonl") -> Path:
    """Write float32 WAVs for every clip plus a JSON Lines manifest."""
    out_dir = Path(out_dir)
    audio = out_dir / "audio"
    audio.mkdir(parents=True, exist_ok=True)
    records = []
    for scape in scapes:
        seed, index = scape.seed
        cid = f"{prefix}-{index:05d}"
        mix_rel = f"audio/{cid}_mix.wav"
        dsp.write_wav(out_dir / mix_rel, scape.mixture, cfg.sample_rate)
        stems = {}
        for name, stem, active in zip(cfg.classes, scape.stems, scape.labels):
            if active:
                rel = f"audio/{cid}_{name}.wav"
                dsp.write_wav(out_dir / rel, stem, cfg.sample_rate)
                stems[name] = rel
            else:
                stems[name] = None
        bg = None
        if scape.background is not None:
            rel = f"audio/{cid}_background.wav"
            dsp.write_wav(out_dir / rel, scape.background, cfg.sample_rate)
            bg = {"path": rel, "lufs": scape.background_lufs}
        records.append(ManifestRecord(cid, mix_rel, stems,
                                      {n: int(v) for n, v in zip(cfg.classes, scape.labels)}, bg,
                                      int(cfg.sample_rate), float(cfg.duration_s), int(seed)))
    return write_manifest(records, out_dir / manifest_name)


def write_manifest(records: Sequence[ManifestRecord], path: str | Path) -> Path:
    ids = [r.clip_id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError("clip ids must be unique")
    path = Path(path)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")
    return path


_FIELDS = ("clip_id", "mixture", "stems", "labels", "background", "sample_rate", "duration_s", "seed")


def read_manifest(path: str | Path, check_files: bool = True) -> Manifest:
    """Parse a JSON Lines manifest; relative paths resolve against its directory."""
    path = Path(path)
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                missing = [k for k in _FIELDS if k not in doc]
                if missing:
                    raise ValueError(f"missing fields {missing}")
                rec = ManifestRecord(**{k: doc[k] for k in _FIELDS})
            except (ValueError, TypeError) as err:
                raise ManifestError(f"{path}:{lineno}: malformed record: {err}") from None
            records.append(rec)
    ids = [r.clip_id for r in records]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate clip ids")
    manifest = Manifest(records, path.parent)
    if check_files:
        for r in records:
            refs = [r.mixture] + [p for p in r.stems.values() if p] + ([r.background["path"]] if r.background else [])
            for rel in refs:
                if not manifest.path(rel).is_file():
                    raise ManifestError(f"clip {r.clip_id}: missing file {rel}")
    return manifest
