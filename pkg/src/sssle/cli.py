"""Command-line entry point: ``sssle <command> [options]``.

Commands: ``synth``, ``train-classifier``, ``train-separator``, ``eval``,
``report`` and ``ablate``. Exit codes: 0 success, 2 usage or config error,
3 I/O error, 4 numerical failure. Relative paths resolve against
``--workdir``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import zlib
from collections import Counter
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__, data, losses, metrics, models, report, scenegen
from .config import ConfigError, RunConfig, parse_levels
from .dsp import AudioFormatError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
LOCK_NAME = ".sssle.lock"

log = logging.getLogger("sssle")


class UsageError(Exception):
    """Bad arguments or inconsistent inputs (exit code 2)."""


class OutputLocked(OSError):
    pass


# -- helpers ------------------------------------------------------------------------

class Context:
    def __init__(self, args):
        self.workdir = Path(args.workdir)
        self.args = args

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.workdir / p

    def config(self) -> RunConfig:
        if getattr(self.args, "config", None):
            return RunConfig.load(self.path(self.args.config))
        return RunConfig.from_dict({})


@contextmanager
def locked(out_dir: Path):
    """Create ``out_dir`` and hold an exclusive lock file in it."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputLocked(f"{out_dir} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(ctx: Context, rel, cfg: RunConfig) -> scenegen.Manifest:
    manifest = scenegen.read_manifest(ctx.path(rel))
    if not manifest.records:
        raise UsageError(f"{rel}: empty manifest")
    if manifest.classes != cfg.classes:
        raise UsageError(f"{rel}: classes {manifest.classes} do not match config classes {cfg.classes}")
    rates = {r.sample_rate for r in manifest.records}
    if rates != {cfg.scene().sample_rate}:
        raise UsageError(f"{rel}: sample rate {sorted(rates)} does not match config {cfg.scene().sample_rate}")
    return manifest


def parse_epsilon(text: str | None):
    if text is None:
        return None
    if text == "auto":
        return "auto"
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        raise UsageError(f"--epsilon must be 'auto', a number or a JSON object, got {text!r}") from None
    if not isinstance(value, (int, float, dict)):
        raise UsageError("--epsilon must be 'auto', a number or a JSON object")
    return value


def resolve_epsilon(cfg: RunConfig, manifest: scenegen.Manifest, override=None) -> dict[str, float]:
    """Per-aggregation margins: explicit values, or estimated from the training manifest."""
    mode = cfg.epsilon_mode if override is None else override
    names = cfg.raw["loss"]["aggregation"]
    if mode == "auto":
        agg = cfg.loss_config({}).aggregation
        clips = data.margin_clips(manifest, cfg.stft)
        loss = cfg.raw["loss"]
        return losses.estimate_epsilons(clips, agg, float(loss["salience_threshold"]), loss["divisor"])
    if isinstance(mode, (int, float)):
        return {n: float(mode) for n in names}
    return {k: float(v) for k, v in mode.items()}


def derived_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


def safe_name(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


# -- commands -----------------------------------------------------------------------------

def cmd_synth(ctx: Context) -> int:
    a = ctx.args
    cfg = ctx.config()
    overrides = {}
    if a.levels:
        overrides["background_levels"] = list(parse_levels(a.levels.split(",")))
    if a.seed is not None:
        overrides["seed"] = a.seed
    if overrides:
        # echo the command-line overrides into the saved config
        cfg = RunConfig.from_dict({**cfg.raw, "scene": {**cfg.raw["scene"], **overrides}})
    scene = cfg.scene()
    if a.stems or a.backgrounds:
        stems_dir = ctx.path(a.stems) if a.stems else None
        bgs_dir = ctx.path(a.backgrounds) if a.backgrounds else None
        for base in (stems_dir, bgs_dir):
            if base is not None and not (base / a.split).is_dir() and not a.allow_shared_pools:
                raise UsageError(f"{base} has no '{a.split}' partition; splits would share material "
                                 "(pass --allow-shared-pools to accept)")
        all_paths = {split: scenegen.pool_paths(stems_dir, bgs_dir, split, scene.classes)
                     for split in ("train", "valid", "test")
                     if any(b is not None and (b / split).is_dir() for b in (stems_dir, bgs_dir))}
        if not a.allow_shared_pools:
            scenegen.check_disjoint(all_paths)
        stems, bgs, _ = scenegen.load_pools(stems_dir, bgs_dir, a.split, scene.classes, scene.sample_rate)
        if stems is None:
            stems, _ = scenegen.builtin_pools(scene.classes, scene.sample_rate, a.split, scene.seed)
    else:
        stems, bgs = scenegen.builtin_pools(scene.classes, scene.sample_rate, a.split, scene.seed)
    if any(lv is not None for lv in scene.background_levels) and not bgs:
        raise UsageError("background levels requested but no background clips are available")
    out = ctx.path(a.out)
    with locked(out):
        scapes = scenegen.generate(scene, a.count, stems, bgs, offset=a.offset)
        scenegen.write_dataset(scapes, scene, out, prefix=a.split)
        cfg.save(out / "config.json")
    events = Counter(e["class"] for s in scapes for e in s.events)
    active = Counter(c for s in scapes for c, v in zip(scene.classes, s.labels) if v)
    n_events = sum(len(s.events) for s in scapes)
    print(f"wrote {len(scapes)} clips to {out} ({n_events / len(scapes):.3f} events per clip)")
    print(f"{'class':<16}{'events':>8}{'clips':>8}{'share':>8}")
    for c in scene.classes:
        print(f"{c:<16}{events[c]:>8}{active[c]:>8}{active[c] / len(scapes):>8.3f}")
    levels = Counter("none" if s.background_lufs is None else f"{s.background_lufs:g}" for s in scapes)
    print("background levels: " + ", ".join(f"{k}={v}" for k, v in sorted(levels.items())))
    return EXIT_OK


def _train_outputs(out: Path, state: models.ModelState, cfg: RunConfig, extra: dict, started: float) -> None:
    state.save(out / "model.json")
    cfg.save(out / "config.json")
    meta = state.training_meta
    write_json(out / "train_log.json", {"config_digest": cfg.digest(), "epochs_run": meta["epochs_run"],
                                        "best_val_loss": meta["best_val_loss"], "history": meta["history"],
                                        **extra})
    # wall-clock facts live apart from the reproducible log
    write_json(out / "timing.json", {"started_unix": started, "elapsed_s": time.time() - started})


def cmd_train_classifier(ctx: Context) -> int:
    a = ctx.args
    cfg = ctx.config()
    started = time.time()
    train = data.load_features(read_manifest(ctx, a.data, cfg), cfg.stft, cfg.floor_db, cfg.classes)
    val = data.load_features(read_manifest(ctx, a.val, cfg), cfg.stft, cfg.floor_db, cfg.classes)
    hidden = cfg.raw["model"]["classifier"]["hidden"]
    out = ctx.path(a.out)
    with locked(out):
        state = models.train_classifier(train, val, cfg.train, hidden, cfg.floor_db)
        _train_outputs(out, state, cfg, {"model": "classifier"}, started)
    print(f"classifier: {state.training_meta['epochs_run']} epochs, "
          f"best val loss {state.training_meta['best_val_loss']:.6g}")
    return EXIT_OK


def _load_classifier(ctx: Context, rel, cfg: RunConfig) -> models.ModelState:
    clf = models.ModelState.load(ctx.path(rel))
    if clf.arch.get("kind") != "classifier":
        raise UsageError(f"{rel} is not a classifier artifact")
    if clf.arch["n_classes"] != len(cfg.classes):
        raise UsageError(f"classifier has {clf.arch['n_classes']} classes, config has {len(cfg.classes)}")
    return clf


def _train_separator(cfg: RunConfig, train, val, classifier, loss_cfg, seed=None) -> models.ModelState:
    sep = cfg.raw["model"]["separator"]
    tc = cfg.train
    if seed is not None:
        tc = models.TrainConfig(**{**tc.__dict__, "seed": seed})
    return models.train_separator(train, val, tc, classifier, loss_cfg, int(sep["context_radius"]), sep["hidden"])


def cmd_train_separator(ctx: Context) -> int:
    a = ctx.args
    cfg = ctx.config()
    started = time.time()
    train_m = read_manifest(ctx, a.data, cfg)
    clf = _load_classifier(ctx, a.classifier, cfg)
    eps = resolve_epsilon(cfg, train_m, parse_epsilon(a.epsilon))
    loss_cfg = cfg.loss_config(eps)
    train = data.load_features(train_m, cfg.stft, cfg.floor_db, cfg.classes)
    val = data.load_features(read_manifest(ctx, a.val, cfg), cfg.stft, cfg.floor_db, cfg.classes)
    log.info("epsilon %s", eps)
    out = ctx.path(a.out)
    with locked(out):
        state = _train_separator(cfg, train, val, clf, loss_cfg)
        _train_outputs(out, state, cfg, {"model": "separator", "epsilon": eps,
                                         "aggregation": loss_cfg.aggregation.names}, started)
    print(f"separator: {state.training_meta['epochs_run']} epochs, "
          f"best val loss {state.training_meta['best_val_loss']:.6g}; epsilon "
          + ", ".join(f"{k}={v:.6g}" for k, v in eps.items()))
    return EXIT_OK


def _evaluate(cfg: RunConfig, manifest, separator: models.ModelState | None):
    try:
        clips = metrics.load_eval_clips(manifest)
    except ValueError as err:
        raise UsageError(str(err)) from None
    if separator is not None and separator.arch["n_classes"] != len(cfg.classes):
        raise UsageError(f"separator has {separator.arch['n_classes']} classes, config has {len(cfg.classes)}")
    mask_fn = None if separator is None else metrics.separator_mask_fn(separator, cfg.floor_db)
    leakage: list = []
    records = metrics.evaluate(clips, mask_fn, cfg.stft, leakage=leakage)
    return records, leakage


def _print_summary(records) -> None:
    rows = metrics.summarize(records, ("background_condition",), ("dbfs_abs_err", "si_sdri_db"))
    for r in rows:
        print(f"{r.condition:<10}{r.metric:<14} median {r.median:8.3f}  q1 {r.q1:8.3f}  q3 {r.q3:8.3f}  n {r.n}")


def cmd_eval(ctx: Context) -> int:
    a = ctx.args
    cfg = ctx.config()
    if bool(a.separator) == bool(a.baseline_mixture):
        raise UsageError("pass exactly one of --separator or --baseline-mixture")
    manifest = read_manifest(ctx, a.data, cfg)
    sep = None if a.baseline_mixture else models.ModelState.load(ctx.path(a.separator))
    out = ctx.path(a.out)
    with locked(out):
        records, leakage = _evaluate(cfg, manifest, sep)
        if not records:
            raise UsageError("no active, non-silent references to score")
        metrics.write_records(records, out / "records.jsonl")
        with open(out / "leakage.jsonl", "w") as fh:
            for item in leakage:
                fh.write(json.dumps(item) + "\n")
        cfg.save(out / "config.json")
    print(f"{len(records)} records written to {out / 'records.jsonl'}")
    _print_summary(records)
    return EXIT_OK


def cmd_report(ctx: Context) -> int:
    a = ctx.args
    labels = a.labels or [Path(p).parent.name or Path(p).stem for p in a.results]
    if len(labels) != len(a.results):
        raise UsageError(f"{len(a.results)} results files but {len(labels)} labels")
    results = [(label, metrics.read_records(ctx.path(p))) for label, p in zip(labels, a.results)]
    out = ctx.path(a.out)
    with locked(out):
        try:
            meta = report.write_report(results, out, sources=[str(ctx.path(p)) for p in a.results])
        except report.ReportError as err:
            raise UsageError(str(err)) from None
    print(f"report for {', '.join(meta['models'])} written to {out}")
    return EXIT_OK


def cmd_ablate(ctx: Context) -> int:
    a = ctx.args
    cfg = ctx.config()
    train_m = read_manifest(ctx, a.data, cfg)
    test_m = read_manifest(ctx, a.test, cfg)
    clf = _load_classifier(ctx, a.classifier, cfg)
    mel, lin = cfg.banks()
    base = cfg.loss_config({})
    full = RunConfig.from_dict({**cfg.raw, "loss": {**cfg.raw["loss"],
                                                   "aggregation": ["tf-mel", "spectrum-mel", "global"]}})
    eps = resolve_epsilon(full, train_m, parse_epsilon(a.epsilon))
    grid = losses.ablation_grid(mel, lin, base, eps)
    names = [n for n in grid if not a.only or any(s in n for s in a.only)]
    if not names:
        raise UsageError(f"--only {a.only} matches no ablation entry")
    train = data.load_features(train_m, cfg.stft, cfg.floor_db, cfg.classes)
    val = data.load_features(read_manifest(ctx, a.val, cfg), cfg.stft, cfg.floor_db, cfg.classes)
    out = ctx.path(a.out)
    results = []
    with locked(out):
        cfg.save(out / "config.json")
        index = {}
        for name in names:
            seed = derived_seed(cfg.train.seed, name)
            run_dir = out / safe_name(name)
            run_dir.mkdir(exist_ok=True)
            started = time.time()
            state = _train_separator(cfg, train, val, clf, grid[name], seed)
            _train_outputs(run_dir, state, cfg, {"model": "separator", "ablation": name, "seed": seed,
                                                 "epsilon": dict(grid[name].epsilon), "beta": grid[name].beta,
                                                 "aggregation": grid[name].aggregation.names}, started)
            records, _ = _evaluate(cfg, test_m, state)
            metrics.write_records(records, run_dir / "records.jsonl")
            results.append((name, records))
            index[name] = safe_name(name)
            print(f"{name}: median dBFS error {np.median([r.dbfs_abs_err for r in records]):.3f}, "
                  f"median SI-SDRi {np.median([r.si_sdri_db for r in records]):.3f}")
        write_json(out / "ablation_index.json", index)
        report.write_report(results, out / "report",
                            sources=[str(out / index[n] / "records.jsonl") for n, _ in results])
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sssle", description="Weakly supervised source-specific sound level estimation.")
    p.add_argument("--workdir", default=".", help="root for relative paths (default: current directory)")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize a soundscape dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--stems", help="stem directory: [<split>/]<class>/*.wav")
    s.add_argument("--backgrounds", help="background directory: [<split>/]*.wav")
    s.add_argument("--levels", help="comma list of background LUFS levels or 'none', overrides the config")
    s.add_argument("--seed", type=int, help="overrides scene.seed")
    s.add_argument("--offset", type=int, default=0, help="index of the first clip")
    s.add_argument("--allow-shared-pools", action="store_true")
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (("train-classifier", cmd_train_classifier, "pre-train the clip classifier"),
                              ("train-separator", cmd_train_separator, "train the separator")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--config")
        t.add_argument("--data", required=True, help="training manifest")
        t.add_argument("--val", required=True, help="validation manifest")
        t.add_argument("--out", required=True)
        if name == "train-separator":
            t.add_argument("--classifier", required=True, help="classifier model.json")
            t.add_argument("--epsilon", help="'auto', a number, or a JSON map of aggregation name to margin")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="score a separator on a manifest with reference stems")
    e.add_argument("--config")
    e.add_argument("--data", required=True)
    e.add_argument("--separator")
    e.add_argument("--baseline-mixture", action="store_true", help="use the mixture as every estimate")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="CSV summaries and SVG boxplots")
    r.add_argument("--results", nargs="+", required=True)
    r.add_argument("--labels", nargs="+")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    b = sub.add_parser("ablate", help="train and score every ablation configuration")
    b.add_argument("--config")
    b.add_argument("--data", required=True)
    b.add_argument("--val", required=True)
    b.add_argument("--test", required=True)
    b.add_argument("--classifier", required=True)
    b.add_argument("--epsilon")
    b.add_argument("--only", nargs="+", help="run only entries containing any of these substrings")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(Context(args))
    except (UsageError, ConfigError, scenegen.SceneError, losses.MarginSourceError) as err:
        print(f"sssle: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, scenegen.ManifestError, AudioFormatError) as err:
        print(f"sssle: I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except models.NumericalError as err:
        print(f"sssle: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as err:
        # remaining validation failures from the library are input problems
        print(f"sssle: error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
