"""Turn manifests into model inputs and margin-estimation clips."""
from __future__ import annotations

import numpy as np

from . import dsp
from .dsp import StftConfig
from .losses import MarginClip
from .models import ClipFeatures
from .scenegen import Manifest


def _magnitude(manifest: Manifest, rel: str, cfg: StftConfig) -> np.ndarray:
    x, _ = dsp.read_wav(manifest.path(rel))
    return np.abs(dsp.stft(x, cfg))


def load_features(manifest: Manifest, cfg: StftConfig, floor_db: float = -80.0,
                  classes: list[str] | None = None) -> list[ClipFeatures]:
    classes = classes or manifest.classes
    out = []
    for r in manifest.records:
        if list(r.labels) != classes:
            raise ValueError(f"clip {r.clip_id}: classes {list(r.labels)} differ from {classes}")
        x, _ = dsp.read_wav(manifest.path(r.mixture))
        spec = dsp.stft(x, cfg)
        out.append(ClipFeatures(r.clip_id, np.abs(spec), dsp.log_magnitude(spec, floor_db),
                                np.array([r.labels[c] for c in classes], dtype=np.float64),
                                r.background is not None))
    return out


def margin_clips(manifest: Manifest, cfg: StftConfig) -> list[MarginClip]:
    """Stem-based margin clips when every active stem is on disk, else background references."""
    with_stems = all(r.stems.get(c) for r in manifest.records for c, v in r.labels.items() if v)
    any_background = any(r.background is not None for r in manifest.records)
    clips = []
    for r in manifest.records:
        x = _magnitude(manifest, r.mixture, cfg)
        y = np.array(list(r.labels.values()), dtype=np.float64)
        if with_stems:
            stems = np.zeros((len(y),) + x.shape)
            for i, (name, active) in enumerate(r.labels.items()):
                if active:
                    stems[i] = _magnitude(manifest, r.stems[name], cfg)
            clips.append(MarginClip(x, y, stems=stems))
        elif r.background is not None:
            clips.append(MarginClip(x, y, background=_magnitude(manifest, r.background["path"], cfg)))
        elif any_background:
            # background-free clip in a background-referenced set: zero margin
            clips.append(MarginClip(x, y, background=np.zeros_like(x)))
        else:
            clips.append(MarginClip(x, y))
    return clips
