"""CSV summaries and static SVG boxplots for evaluation records.

Figures are written by hand as SVG text with fixed axes per metric, so the
same records always produce the same bytes. Each figure names the CSV of
box statistics it was drawn from.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import CONDITIONS, METRICS, EvalRecord, SummaryRow, quartiles, summarize

SUMMARY_COLUMNS = ("model", "condition", "class", "metric", "median", "q1", "q3", "n")
FIGURE_METRICS = ("dbfs_abs_err", "si_sdri_db")
AXES = {"dbfs_abs_err": (0.0, 40.0, "absolute dBFS error (dB)"),
        "si_sdri_db": (-10.0, 30.0, "SI-SDR improvement (dB)")}
CONDITION_ORDER = tuple(CONDITIONS.values())
PALETTE = ("#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860")


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class BoxStats:
    model: str
    condition: str
    metric: str
    whisker_lo: float
    q1: float
    median: float
    q3: float
    whisker_hi: float
    n: int


def box_stats(values, model: str = "", condition: str = "", metric: str = "") -> BoxStats:
    """Tukey box: whiskers reach the furthest data within 1.5 IQR of the box.

    A whisker never ends inside the box; when every point beyond a quartile
    is an outlier the whisker collapses onto that quartile.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ReportError("no values for box statistics")
    q1, med, q3 = quartiles(v)
    iqr = q3 - q1
    inside = v[(v >= q1 - 1.5 * iqr) & (v <= q3 + 1.5 * iqr)]
    lo, hi = min(float(inside[0]), q1), max(float(inside[-1]), q3)
    return BoxStats(model, condition, metric, lo, q1, med, q3, hi, int(v.size))


def summary_rows(results: Sequence[tuple[str, Sequence[EvalRecord]]]) -> list[SummaryRow]:
    rows = []
    for label, records in results:
        rows.extend(summarize(records, ("background_condition", "cls"), METRICS, model=label))
    return rows


def _fmt(x: float) -> str:
    return repr(float(x))


def write_summary_csv(rows: Sequence[SummaryRow], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in rows:
            w.writerow([r.model, r.condition, r.cls, r.metric, _fmt(r.median), _fmt(r.q1), _fmt(r.q3), r.n])
    return path


def figure_stats(results, metric: str) -> list[BoxStats]:
    """Box statistics per (model, condition), classes pooled, conditions in canonical order."""
    out = []
    for label, records in results:
        by_cond: dict[str, list[float]] = {}
        for r in records:
            by_cond.setdefault(r.background_condition, []).append(getattr(r, metric))
        for cond in CONDITION_ORDER:
            if cond in by_cond:
                out.append(box_stats(by_cond[cond], label, cond, metric))
    return out


def write_box_csv(stats: Sequence[BoxStats], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("model", "condition", "metric", "whisker_lo", "q1", "median", "q3", "whisker_hi", "n"))
        for s in stats:
            w.writerow([s.model, s.condition, s.metric, _fmt(s.whisker_lo), _fmt(s.q1), _fmt(s.median),
                        _fmt(s.q3), _fmt(s.whisker_hi), s.n])
    return path


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def boxplot_svg(stats: Sequence[BoxStats], metric: str, models: Sequence[str], source_csv: str) -> str:
    """Grouped boxplots: one group per condition, one box per model."""
    lo, hi, ylabel = AXES[metric]
    conds = [c for c in CONDITION_ORDER if any(s.condition == c for s in stats)]
    width, height = 120 + 160 * max(1, len(conds)), 360
    left, right, top, bottom = 70, 20, 30, 300
    plot_w = width - left - right

    def y(v: float) -> float:
        v = min(max(v, lo), hi)
        return bottom - (v - lo) / (hi - lo) * (bottom - top)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f"<desc>{_esc(metric)} drawn from {_esc(source_csv)}</desc>",
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>']
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        parts.append(f'<line x1="{left}" y1="{y(v):.2f}" x2="{width - right}" y2="{y(v):.2f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{left - 6}" y="{y(v) + 4:.2f}" text-anchor="end">{v:g}</text>')
    parts.append(f'<text x="16" y="{(top + bottom) / 2:.2f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {(top + bottom) / 2:.2f})">{_esc(ylabel)}</text>')
    group_w = plot_w / max(1, len(conds))
    box_w = min(28.0, group_w * 0.8 / max(1, len(models)))
    for gi, cond in enumerate(conds):
        gx = left + gi * group_w
        parts.append(f'<text x="{gx + group_w / 2:.2f}" y="{bottom + 18}" text-anchor="middle">{_esc(cond)}</text>')
        for mi, model in enumerate(models):
            s = next((s for s in stats if s.condition == cond and s.model == model), None)
            if s is None:
                continue
            cx = gx + group_w / 2 + (mi - (len(models) - 1) / 2) * box_w * 1.15
            x0, x1 = cx - box_w / 2, cx + box_w / 2
            color = PALETTE[mi % len(PALETTE)]
            parts.append(f'<line x1="{cx:.2f}" y1="{y(s.whisker_lo):.2f}" x2="{cx:.2f}" y2="{y(s.q1):.2f}" stroke="black"/>')
            parts.append(f'<line x1="{cx:.2f}" y1="{y(s.q3):.2f}" x2="{cx:.2f}" y2="{y(s.whisker_hi):.2f}" stroke="black"/>')
            for w in (s.whisker_lo, s.whisker_hi):
                parts.append(f'<line x1="{cx - box_w / 4:.2f}" y1="{y(w):.2f}" x2="{cx + box_w / 4:.2f}" '
                             f'y2="{y(w):.2f}" stroke="black"/>')
            parts.append(f'<rect x="{x0:.2f}" y="{y(s.q3):.2f}" width="{box_w:.2f}" '
                         f'height="{y(s.q1) - y(s.q3):.2f}" fill="{color}" stroke="black"/>')
            parts.append(f'<line x1="{x0:.2f}" y1="{y(s.median):.2f}" x2="{x1:.2f}" y2="{y(s.median):.2f}" '
                         f'stroke="black" stroke-width="2"/>')
    for mi, model in enumerate(models):
        lx = left + 10 + mi * 130
        parts.append(f'<rect x="{lx}" y="{height - 30}" width="10" height="10" fill="{PALETTE[mi % len(PALETTE)]}"/>')
        parts.append(f'<text x="{lx + 14}" y="{height - 21}">{_esc(model)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_report(results: Sequence[tuple[str, Sequence[EvalRecord]]], out_dir, sources: Sequence[str] = ()) -> dict:
    """Write ``summary.csv``, per-figure box CSVs and SVGs, and ``report.json``.

    Returns the report metadata, which lists every file written.
    """
    if not results:
        raise ReportError("at least one results set is required")
    labels = [label for label, _ in results]
    if len(set(labels)) != len(labels):
        raise ReportError(f"duplicate model labels {labels}")
    for label, records in results:
        if not records:
            raise ReportError(f"results for {label!r} are empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_summary_csv(summary_rows(results), out / "summary.csv")
    figures = {}
    for metric in FIGURE_METRICS:
        stats = figure_stats(results, metric)
        box_csv = f"{metric}_boxes.csv"
        write_box_csv(stats, out / box_csv)
        (out / f"{metric}.svg").write_text(boxplot_svg(stats, metric, labels, box_csv))
        figures[f"{metric}.svg"] = box_csv
    meta = {"models": labels, "summary": "summary.csv", "figures": figures,
            "inputs": {label: {"path": str(src), "sha256": _sha256(src)} for label, src in zip(labels, sources)}}
    (out / "report.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta
