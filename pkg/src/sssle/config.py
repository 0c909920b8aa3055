"""Run configuration: one JSON document covering every pipeline stage."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import StftConfig
from .losses import LossConfig
from .models import TrainConfig
from .scenegen import BUILTIN_CLASSES, SceneConfig
from .tfagg import AGGREGATION_NAMES, build_set, linear_filterbank, mel_filterbank

DEFAULTS = {
    "classes": list(BUILTIN_CLASSES),
    "stft": {"n_fft": 512, "hop": 128, "window": "sqrt-hann"},
    "mel_bands": 40,
    "log_floor_db": -80.0,
    "loss": {
        "aggregation": ["tf-mel", "spectrum-mel", "global"],
        "alpha": 100.0,
        "beta": 1,
        "epsilon": "auto",
        "salience_threshold": 0.01,
        "divisor": "aggregated",
    },
    "model": {
        "separator": {"context_radius": 2, "hidden": [256, 256]},
        "classifier": {"hidden": [128]},
    },
    "train": {"lr": 1e-4, "batch": 8, "max_epochs": 50, "patience": 5, "seed": 0, "clip_norm": 10.0},
    "scene": {"duration_s": 4.0, "sample_rate": 16000, "lambda": 5.0, "background_levels": "none", "seed": 0},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, path + k + ".")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    """Effective configuration after defaults are filled in."""
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls(_merge(DEFAULTS, doc))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON: {err}") from None
        return cls.from_dict(doc)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def validate(self) -> None:
        try:
            self.stft
            self.scene()
            self.train
        except (ValueError, TypeError) as err:
            raise ConfigError(str(err)) from None
        loss = self.raw["loss"]
        bad = [n for n in loss["aggregation"] if n not in AGGREGATION_NAMES]
        if bad or not loss["aggregation"]:
            raise ConfigError(f"invalid aggregation names {bad}; expected a nonempty subset of {AGGREGATION_NAMES}")
        eps = loss["epsilon"]
        if eps != "auto" and not isinstance(eps, (dict, int, float)):
            raise ConfigError("loss.epsilon must be 'auto', a number, or a map of aggregation name to margin")
        try:
            self.loss_config({} if eps == "auto" else None)
        except ValueError as err:
            raise ConfigError(str(err)) from None

    # -- typed views ------------------------------------------------------------

    @property
    def classes(self) -> list[str]:
        return list(self.raw["classes"])

    @property
    def stft(self) -> StftConfig:
        return StftConfig(**self.raw["stft"])

    @property
    def floor_db(self) -> float:
        return float(self.raw["log_floor_db"])

    @property
    def train(self) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(lr=float(t["lr"]), batch=int(t["batch"]), max_epochs=int(t["max_epochs"]),
                           patience=int(t["patience"]), seed=int(t["seed"]),
                           clip_norm=None if t["clip_norm"] is None else float(t["clip_norm"]))

    def scene(self, background_levels=None, seed=None) -> SceneConfig:
        s = self.raw["scene"]
        levels = s["background_levels"] if background_levels is None else background_levels
        return SceneConfig(classes=tuple(self.classes), duration_s=float(s["duration_s"]),
                           sample_rate=int(s["sample_rate"]), lam=float(s["lambda"]),
                           background_levels=parse_levels(levels),
                           seed=int(s["seed"] if seed is None else seed))

    def banks(self):
        sr = int(self.raw["scene"]["sample_rate"])
        n_fft = self.stft.n_fft
        return mel_filterbank(n_fft, int(self.raw["mel_bands"]), sr), linear_filterbank(n_fft)

    @property
    def epsilon_mode(self):
        return self.raw["loss"]["epsilon"]

    def loss_config(self, epsilon: dict | None = None) -> LossConfig:
        """Loss configuration; ``epsilon`` overrides the configured margins."""
        loss = self.raw["loss"]
        mel, lin = self.banks()
        agg = build_set(loss["aggregation"], mel, lin)
        if epsilon is None:
            eps = loss["epsilon"]
            if eps == "auto":
                raise ConfigError("epsilon is 'auto'; estimate it from the training data first")
            epsilon = {n: float(eps) for n in agg.names} if isinstance(eps, (int, float)) else dict(eps)
        return LossConfig(agg, alpha=float(loss["alpha"]), beta=int(loss["beta"]), epsilon=epsilon,
                          salience_threshold=float(loss["salience_threshold"]), divisor=loss["divisor"])


def parse_levels(levels) -> tuple:
    if levels == "none" or levels is None:
        return (None,)
    if isinstance(levels, (int, float)):
        return (float(levels),)
    return tuple(None if v in (None, "none") else float(v) for v in levels)
