"""Separation and level-estimation metrics, evaluation loop and summaries."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import dsp
from .dsp import LEVEL_FLOOR_DB, StftConfig

SI_SDR_CAP = 100.0
CONDITIONS = {None: "none", -50.0: "weak", -20.0: "moderate", 0.0: "strong"}
METRICS = ("si_sdr_db", "si_sdri_db", "dbfs_abs_err")

log = logging.getLogger(__name__)


def si_sdr(est: np.ndarray, ref: np.ndarray) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB."""
    est = np.asarray(est, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch: {est.shape} vs {ref.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise ValueError("undefined SI-SDR: silent reference")
    target = (est @ ref) / ref_energy * ref
    resid = est - target
    num = float(target @ target)
    den = float(resid @ resid)
    if den <= num * 10.0 ** (-SI_SDR_CAP / 10.0):
        return SI_SDR_CAP
    return 10.0 * np.log10(num / den)


def si_sdr_improvement(est, ref, mix) -> float:
    return si_sdr(est, ref) - si_sdr(mix, ref)


def dbfs_abs_error(est, ref) -> float:
    """``|dbfs(est) - dbfs(ref)|``; raises for a silent reference."""
    ref_level = dsp.dbfs(ref)
    if ref_level <= LEVEL_FLOOR_DB:
        raise ValueError("silent reference: level error undefined")
    return abs(dsp.dbfs(est) - ref_level)


def condition_name(lufs: float | None) -> str:
    if lufs is None:
        return "none"
    # nearest named level
    named = [k for k in CONDITIONS if k is not None]
    return CONDITIONS[min(named, key=lambda k: abs(k - lufs))]


@dataclass
class EvalRecord:
    clip_id: str
    cls: str
    si_sdr_db: float
    si_sdri_db: float
    dbfs_est: float
    dbfs_ref: float
    dbfs_abs_err: float
    background_condition: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class"] = d.pop("cls")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalRecord":
        d = dict(d)
        d["cls"] = d.pop("class")
        return cls(**d)


@dataclass
class EvalClip:
    clip_id: str
    mixture: np.ndarray
    stems: dict[str, np.ndarray | None]
    labels: dict[str, int]
    background_lufs: float | None


MaskFn = Callable[[EvalClip, np.ndarray], np.ndarray]


def load_eval_clips(manifest) -> list[EvalClip]:
    clips = []
    for r in manifest.records:
        mix, _ = dsp.read_wav(manifest.path(r.mixture))
        stems = {}
        for name, rel in r.stems.items():
            if r.labels[name] and rel is None:
                raise ValueError(f"clip {r.clip_id}: active class {name!r} has no reference stem")
            stems[name] = dsp.read_wav(manifest.path(rel))[0] if rel else None
        clips.append(EvalClip(r.clip_id, mix, stems, dict(r.labels),
                              r.background["lufs"] if r.background else None))
    return clips


def evaluate(clips: Iterable[EvalClip], mask_fn: MaskFn | None, cfg: StftConfig = StftConfig(),
             leakage: list | None = None) -> list[EvalRecord]:
    """Score every active class of every clip.

    ``mask_fn(clip, mix_spec)`` returns ``(C, F, T)`` masks in the clip's
    class order; ``None`` uses the mixture itself as every estimate.
    Metrics use only the STFT interior. When ``leakage`` is a list, the
    level of each inactive-class estimate is appended to it.
    """
    records = []
    for clip in clips:
        names = list(clip.labels)
        spec = dsp.stft(clip.mixture, cfg)
        region = dsp.interior(len(clip.mixture), cfg)
        mix = clip.mixture[region]
        cond = condition_name(clip.background_lufs)
        masks = None if mask_fn is None else np.asarray(mask_fn(clip, spec))
        for i, name in enumerate(names):
            if masks is None:
                est = mix
            else:
                est = dsp.reconstruct_source(masks[i], spec, cfg)[region]
            if not clip.labels[name]:
                if leakage is not None:
                    leakage.append({"clip_id": clip.clip_id, "class": name, "dbfs_est": dsp.dbfs(est)})
                continue
            ref = clip.stems[name][region]
            if dsp.dbfs(ref) <= LEVEL_FLOOR_DB:
                log.info("skipping %s/%s: reference is silent inside the STFT interior", clip.clip_id, name)
                continue
            sdr = si_sdr(est, ref)
            records.append(EvalRecord(
                clip.clip_id, name, sdr, sdr - si_sdr(mix, ref),
                dsp.dbfs(est), dsp.dbfs(ref), dbfs_abs_error(est, ref), cond))
    return records


def separator_mask_fn(state, floor_db: float = -80.0) -> MaskFn:
    from .models import Separator

    sep = Separator.from_state(state)

    def mask_fn(clip, spec):
        return sep.masks(dsp.log_magnitude(spec, floor_db)[None]).data[0]
    return mask_fn


def write_records(records: Sequence[EvalRecord], path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def read_records(path) -> list[EvalRecord]:
    with open(path) as fh:
        return [EvalRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# -- summaries -----------------------------------------------------------------

@dataclass
class SummaryRow:
    model: str
    condition: str
    cls: str
    metric: str
    median: float
    q1: float
    q3: float
    n: int


def quartiles(values) -> tuple[float, float, float]:
    """Type-7 (linear interpolation) first quartile, median, third quartile."""
    q1, med, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return float(q1), float(med), float(q3)


def summarize(records: Sequence[EvalRecord], group_keys: Sequence[str] = ("background_condition", "cls"),
              metrics: Sequence[str] = METRICS, model: str = "") -> list[SummaryRow]:
    """Median and quartiles of each metric per group, groups in sorted order."""
    if not records:
        raise ValueError("no records to summarise")
    groups: dict[tuple, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in group_keys), []).append(r)
    rows = []
    for key in sorted(groups):
        members = groups[key]
        named = dict(zip(group_keys, key))
        for metric in metrics:
            q1, med, q3 = quartiles([getattr(r, metric) for r in members])
            rows.append(SummaryRow(model, named.get("background_condition", "all"), named.get("cls", "all"),
                                   metric, med, q1, q3, len(members)))
    return rows
