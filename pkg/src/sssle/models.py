"""Separator and classifier networks, Adam, and the two training loops.

The separator is a per-frame MLP over a window of ``2r + 1`` log-magnitude
frames that emits ``C`` sigmoid masks. The classifier is a per-frame MLP
over log-magnitude frames whose class logits are max-pooled over time.
Both are defined by a :class:`ModelState` that serialises to JSON.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, as_tensor, sigmoid
from .losses import LossConfig, bce_with_logits, total_loss

log = logging.getLogger(__name__)

ARTIFACT_VERSION = 1
LN10 = float(np.log(10.0))


class NumericalError(RuntimeError):
    """A NaN or infinity showed up during training."""


# -- model state ------------------------------------------------------------------

@dataclass
class ModelState:
    arch: dict
    params: dict[str, np.ndarray]
    init_seed: int
    training_meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "version": ARTIFACT_VERSION,
            "arch": self.arch,
            "init_seed": self.init_seed,
            "params": {k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                       for k, v in self.params.items()},
            "training_meta": self.training_meta,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ModelState":
        doc = json.loads(text)
        if doc.get("version") != ARTIFACT_VERSION:
            raise ValueError(f"unsupported model artifact version {doc.get('version')!r}")
        params = {k: np.asarray(v["values"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["params"].items()}
        state = cls(doc["arch"], params, int(doc["init_seed"]), doc.get("training_meta", {}))
        state.check()
        return state

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ModelState":
        return cls.from_json(Path(path).read_text())

    def check(self) -> None:
        expected = param_shapes(self.arch)
        if set(expected) != set(self.params):
            raise ValueError(f"parameters {sorted(self.params)} do not match architecture {sorted(expected)}")
        for k, shape in expected.items():
            if self.params[k].shape != shape:
                raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {shape}")

    def copy(self) -> "ModelState":
        return ModelState(dict(self.arch), {k: v.copy() for k, v in self.params.items()},
                          self.init_seed, json.loads(json.dumps(self.training_meta)))


def separator_arch(n_bins: int, n_classes: int, context_radius: int = 2,
                   hidden: Sequence[int] = (256, 256)) -> dict:
    if context_radius < 0:
        raise ValueError("context_radius must be >= 0")
    return {"kind": "separator", "n_bins": n_bins, "n_classes": n_classes,
            "context_radius": context_radius, "hidden": list(hidden), "activation": "relu"}


def classifier_arch(n_bins: int, n_classes: int, hidden: Sequence[int] = (128,)) -> dict:
    return {"kind": "classifier", "n_bins": n_bins, "n_classes": n_classes,
            "hidden": list(hidden), "activation": "relu", "pooling": "max"}


def _layer_sizes(arch: dict) -> list[int]:
    f, c = arch["n_bins"], arch["n_classes"]
    if arch["kind"] == "separator":
        return [(2 * arch["context_radius"] + 1) * f, *arch["hidden"], f * c]
    if arch["kind"] == "classifier":
        return [f, *arch["hidden"], c]
    raise ValueError(f"unknown architecture kind {arch['kind']!r}")


def param_shapes(arch: dict) -> dict[str, tuple]:
    sizes = _layer_sizes(arch)
    shapes = {}
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        shapes[f"W{i}"] = (n_in, n_out)
        shapes[f"b{i}"] = (n_out,)
    return shapes


def init_state(arch: dict, seed: int) -> ModelState:
    """Xavier-uniform weights, zero biases, drawn in layer order from ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch).items():
        if name.startswith("W"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return ModelState(arch, params, int(seed), {})


# -- networks ---------------------------------------------------------------------

def _mlp(h: Tensor, params: dict, n_layers: int) -> Tensor:
    for i in range(n_layers):
        h = h @ params[f"W{i}"] + params[f"b{i}"]
        if i < n_layers - 1:
            h = h.relu()
    return h


def _as_params(state: ModelState, trainable: bool) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=trainable) for k, v in state.params.items()}


def context_frames(x_logmag: np.ndarray, radius: int) -> np.ndarray:
    """Stack frames ``t-r..t+r`` (edges replicated) into ``(B, T, (2r+1)F)``."""
    x = np.asarray(x_logmag, dtype=np.float64)
    t = x.shape[-1]
    idx = np.clip(np.arange(t)[:, None] + np.arange(-radius, radius + 1)[None, :], 0, t - 1)
    # (B, F, T, K) -> (B, T, K, F)
    ctx = np.transpose(x[..., idx], (0, 2, 3, 1))
    return ctx.reshape(x.shape[0], t, -1)


def log_magnitude_tensor(mag, floor_db: float = -80.0, delta: float = 1e-10) -> Tensor:
    """Differentiable twin of :func:`sssle.dsp.log_magnitude` over ``(N, F, T)``."""
    mag = as_tensor(mag)
    n, f, t = mag.shape
    ref = mag.reshape(n, f * t).max(axis=-1).reshape(n, 1, 1) + delta
    floor = ref * 10.0 ** (floor_db / 20.0)
    clamped = floor + (mag - floor).relu()
    return (clamped.log() - floor.log()) * (20.0 / LN10 / -floor_db)


class Separator:
    def __init__(self, arch: dict, params: dict[str, Tensor]):
        if arch["kind"] != "separator":
            raise ValueError("not a separator architecture")
        self.arch = arch
        self.params = params

    @classmethod
    def from_state(cls, state: ModelState, trainable: bool = False) -> "Separator":
        state.check()
        return cls(state.arch, _as_params(state, trainable))

    @property
    def n_classes(self) -> int:
        return self.arch["n_classes"]

    def masks(self, x_logmag) -> Tensor:
        """Masks ``(B, C, F, T)`` for rescaled log-magnitude input ``(B, F, T)``."""
        x = np.asarray(x_logmag, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        b, f, t = x.shape
        if f != self.arch["n_bins"]:
            raise ValueError(f"separator expects {self.arch['n_bins']} bins, got {f}")
        ctx = context_frames(x, self.arch["context_radius"])
        n_layers = len(self.arch["hidden"]) + 1
        out = _mlp(Tensor(ctx.reshape(b * t, -1)), self.params, n_layers).sigmoid()
        return out.reshape(b, t, self.n_classes, f).transpose(0, 2, 3, 1)


class Classifier:
    def __init__(self, arch: dict, params: dict[str, Tensor], floor_db: float = -80.0):
        if arch["kind"] != "classifier":
            raise ValueError("not a classifier architecture")
        self.arch = arch
        self.params = params
        self.floor_db = floor_db

    @classmethod
    def from_state(cls, state: ModelState, trainable: bool = False, floor_db: float = -80.0) -> "Classifier":
        state.check()
        return cls(state.arch, _as_params(state, trainable), floor_db)

    @property
    def n_classes(self) -> int:
        return self.arch["n_classes"]

    def logits_from_features(self, feats) -> Tensor:
        feats = as_tensor(feats)
        n, f, t = feats.shape
        frames = feats.transpose(0, 2, 1).reshape(n * t, f)
        per_frame = _mlp(frames, self.params, len(self.arch["hidden"]) + 1)
        return per_frame.reshape(n, t, self.n_classes).max(axis=1)

    def logits(self, mag) -> Tensor:
        """Clip logits ``(N, C)`` for magnitude spectrograms ``(N, F, T)``."""
        return self.logits_from_features(log_magnitude_tensor(mag, self.floor_db))


def forward_separator(state: ModelState, x_logmag) -> np.ndarray:
    return Separator.from_state(state).masks(x_logmag).data


def forward_classifier(state: ModelState, s_logmag) -> np.ndarray:
    """Clip-level class probabilities for log-magnitude input ``(F, T)`` or ``(N, F, T)``."""
    x = np.asarray(s_logmag, dtype=np.float64)
    single = x.ndim == 2
    logits = Classifier.from_state(state).logits_from_features(x[None] if single else x).data
    probs = sigmoid(logits)
    return probs[0] if single else probs


# -- optimiser --------------------------------------------------------------------

def adam_step(params: dict, grads: dict, state: dict, lr: float = 1e-4,
              betas: tuple[float, float] = (0.9, 0.999), eps_opt: float = 1e-8) -> None:
    """One in-place Adam update with bias correction.

    ``state`` holds ``t`` and the moment dicts ``m``/``v``; it is created on
    the first call.
    """
    b1, b2 = betas
    state["t"] = state.get("t", 0) + 1
    m = state.setdefault("m", {})
    v = state.setdefault("v", {})
    t = state["t"]
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {k} has shape {g.shape}, parameter {p.shape}")
        if k not in m:
            m[k] = np.zeros_like(p)
            v[k] = np.zeros_like(p)
        m[k] = b1 * m[k] + (1.0 - b1) * g
        v[k] = b2 * v[k] + (1.0 - b2) * g * g
        m_hat = m[k] / (1.0 - b1 ** t)
        v_hat = v[k] / (1.0 - b2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps_opt)


def clip_global_norm(grads: dict, max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# -- training ---------------------------------------------------------------------

@dataclass
class ClipFeatures:
    """Per-clip training inputs: magnitudes, rescaled log-magnitudes, labels."""
    clip_id: str
    mag: np.ndarray
    logmag: np.ndarray
    labels: np.ndarray
    has_background: bool = False


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 8
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    clip_norm: float | None = 10.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps_opt: float = 1e-8


def _stack(clips: Sequence[ClipFeatures], attr: str) -> np.ndarray:
    arrays = [getattr(c, attr) for c in clips]
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"clips in a batch must share a shape, got {sorted(shapes)}")
    return np.stack(arrays)


def _batches(n: int, batch: int, rng: np.random.Generator | None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    for i in range(0, n, batch):
        yield order[i:i + batch]


def _check_finite(value: float, grads: dict | None = None) -> None:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss {value}")
    if grads:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in {k}")


def fit(state: ModelState, train: Sequence[ClipFeatures], val: Sequence[ClipFeatures],
        loss_fn: Callable[[dict, list[ClipFeatures]], Tensor], cfg: TrainConfig,
        on_epoch: Callable[[dict], None] | None = None) -> ModelState:
    """Adam with early stopping on validation loss; returns the best state.

    ``loss_fn(params, clips)`` builds the batch loss from a dict of parameter
    tensors. Epoch shuffles come from ``(cfg.seed, epoch)``; the last
    partial batch is kept.
    """
    if not train:
        raise ValueError("empty training set")
    if not val:
        raise ValueError("empty validation set")
    params = {k: v.copy() for k, v in state.params.items()}
    opt_state: dict = {}
    best = state.copy()
    best_val = np.inf
    wait = 0
    history = []

    def evaluate(clips):
        frozen = {k: Tensor(v) for k, v in params.items()}
        total = 0.0
        for idx in _batches(len(clips), cfg.batch, None):
            batch = [clips[i] for i in idx]
            total += loss_fn(frozen, batch).item() * len(batch)
        return total / len(clips)

    for epoch in range(cfg.max_epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        train_total = 0.0
        for idx in _batches(len(train), cfg.batch, rng):
            batch = [train[i] for i in idx]
            tparams = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            loss = loss_fn(tparams, batch)
            loss.backward()
            grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tparams.items()}
            _check_finite(loss.item(), grads)
            clip_global_norm(grads, cfg.clip_norm)
            adam_step(params, grads, opt_state, cfg.lr, cfg.betas, cfg.eps_opt)
            train_total += loss.item() * len(batch)
        val_loss = evaluate(val)
        _check_finite(val_loss)
        entry = {"epoch": epoch + 1, "train_loss": train_total / len(train), "val_loss": val_loss}
        if val_loss < best_val:
            best_val = val_loss
            best = ModelState(state.arch, {k: v.copy() for k, v in params.items()}, state.init_seed, {})
            wait = 0
            entry["best"] = True
        else:
            wait += 1
            entry["best"] = False
        history.append(entry)
        log.info("epoch %d train %.6g val %.6g%s", entry["epoch"], entry["train_loss"], val_loss,
                 " *" if entry["best"] else "")
        if on_epoch:
            on_epoch(entry)
        if wait >= cfg.patience:
            break
    best.training_meta = {"epochs_run": len(history), "best_val_loss": best_val, "history": history}
    return best


def classifier_loss_fn(arch: dict, floor_db: float = -80.0):
    def loss_fn(params, clips):
        clf = Classifier(arch, params, floor_db)
        x = _stack(clips, "mag")
        y = _stack(clips, "labels")
        return bce_with_logits(y, clf.logits(x)).sum(axis=1).mean()
    return loss_fn


def train_classifier(train: Sequence[ClipFeatures], val: Sequence[ClipFeatures], cfg: TrainConfig,
                     hidden: Sequence[int] = (128,), floor_db: float = -80.0) -> ModelState:
    """Fit the clip classifier on mixtures without added background."""
    train = [c for c in train if not c.has_background]
    val = [c for c in val if not c.has_background]
    if not train:
        raise ValueError("empty manifest: no background-free training clips")
    f = train[0].mag.shape[0]
    c = len(train[0].labels)
    state = init_state(classifier_arch(f, c, hidden), cfg.seed)
    return fit(state, train, val, classifier_loss_fn(state.arch, floor_db), cfg)


def separator_loss_fn(arch: dict, classifier: ModelState, loss_cfg: LossConfig):
    clf = Classifier.from_state(classifier)  # constant tensors: frozen

    def loss_fn(params, clips):
        masks = Separator(arch, params).masks(_stack(clips, "logmag"))
        return total_loss(_stack(clips, "mag"), masks, _stack(clips, "labels"), clf, loss_cfg)
    return loss_fn


def train_separator(train: Sequence[ClipFeatures], val: Sequence[ClipFeatures], cfg: TrainConfig,
                    classifier: ModelState, loss_cfg: LossConfig, context_radius: int = 2,
                    hidden: Sequence[int] = (256, 256)) -> ModelState:
    """Fit the mask separator against the full objective with a frozen classifier."""
    if not train:
        raise ValueError("empty manifest")
    f = train[0].mag.shape[0]
    c = len(train[0].labels)
    if classifier.arch["n_classes"] != c:
        raise ValueError(f"classifier has {classifier.arch['n_classes']} classes, data has {c}")
    state = init_state(separator_arch(f, c, context_radius, hidden), cfg.seed)
    best = fit(state, train, val, separator_loss_fn(state.arch, classifier, loss_cfg), cfg)
    best.training_meta["epsilon"] = dict(loss_cfg.epsilon)
    best.training_meta["aggregation"] = loss_cfg.aggregation.names
    return best
