"""Losses, Adam, the configuration matrix and the diarization training loop."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import median_filter

from . import autodiff as ad
from .archive import COMPONENTS, load_into
from .autodiff import ShapeError, Tensor
from .features import TimedSegment, chunk_samples, class_names, frame_bounds, merge_classes, rasterize_labels
from .models import DiarizationModel, ModelSpec
from .scoring import der_breakdown, frame_error_rate

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-10
SEED_ENV = "CRIBDIAR_SEED"


# ---------------------------------------------------------------------------
# losses


def _targets(p: Tensor, y) -> np.ndarray:
    y = np.asarray(y, dtype=p.dtype)
    if y.shape != p.shape:
        raise ShapeError(f"loss: prediction shape {p.shape} does not match target shape {y.shape}")
    return y


def _reduce(loss: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return ad.mean(loss)
    if reduction == "sum":
        return ad.sum(loss)
    if reduction == "none":
        return loss
    raise ValueError(f"unknown reduction {reduction!r}")


def focal_loss(p: Tensor, y, alpha: float = 0.25, gamma: float = 2.0, reduction: str = "mean") -> Tensor:
    """-alpha_t * (1 - p_t)^gamma * log(p_t) on probabilities, averaged over all entries."""
    y = _targets(p, y)
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = (alpha * y + (1.0 - alpha) * (1.0 - y)).astype(p.dtype)
    nll = ad.log(p_t + PROB_FLOOR) * (-alpha_t)
    if gamma != 0:
        nll = nll * ad.power(1.0 - p_t, gamma)
    return _reduce(nll, reduction)


def bce_loss(p: Tensor, y, reduction: str = "mean") -> Tensor:
    y = _targets(p, y)
    p_t = p * y + (1.0 - p) * (1.0 - y)
    return _reduce(-ad.log(p_t + PROB_FLOOR), reduction)


LOSSES = {"focal": focal_loss, "bce": bce_loss}


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam (beta1=0.9, beta2=0.999, eps=1e-8) over named parameters; lr is given per step."""

    def __init__(self, params: Mapping[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[str, dict] = {}

    def step(self, lr: float, frozen: frozenset[str] | set[str] = frozenset()) -> None:
        for name, p in self.params.items():
            if name in frozen or p.grad is None:
                continue
            g = p.grad
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            st["t"] += 1
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * g * g
            m_hat = st["m"] / (1 - self.beta1 ** st["t"])
            v_hat = st["v"] / (1 - self.beta2 ** st["t"])
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    feat: str = "conv"
    embed: str = "blstm"
    cls: str = "linear"
    pretrain: str = "none"
    load_set: list[str] = field(default_factory=list)
    freeze_feat_epochs: int = 0
    freeze_embed_epochs: int = 0
    input_len_s: float = 20.0
    loss: str = "focal"
    lr: float = 0.001
    lr_decay: float = 0.98
    epochs: int = 50
    classes: int = 3
    seed: int = 0
    batch_size: int = 8
    profile: str = "desk"
    threshold: float = 0.5
    median_width: int = 0
    early_stop_der: float | None = None
    early_stop_fer: float | None = None

    def __post_init__(self):
        self.load_set = sorted(set(self.load_set), key=COMPONENTS.index) if self.load_set else []
        if set(self.load_set) - set(COMPONENTS):
            raise ValueError(f"load_set entries must be among {COMPONENTS}")
        if self.pretrain not in ("none", "mil1", "mil2"):
            raise ValueError(f"pretrain must be none, mil1 or mil2, got {self.pretrain!r}")
        if bool(self.load_set) != (self.pretrain != "none"):
            raise ValueError("load_set must be non-empty exactly when pretrain is not 'none'")
        if "cls" in self.load_set and self.pretrain != "mil2":
            raise ValueError("the classifier can only be loaded from MIL2 pre-training")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}")
        if self.classes not in (3, 4):
            raise ValueError("classes must be 3 or 4")
        if self.input_len_s <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ValueError("input_len_s and batch_size must be positive, epochs non-negative")
        if self.median_width and self.median_width % 2 == 0:
            raise ValueError("median_width must be odd")
        ModelSpec(self.feat, self.embed, self.cls, self.classes, self.profile)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(self.feat, self.embed, self.cls, self.classes, self.profile, self.seed)

    def lr_at(self, epoch_index: int) -> float:
        """Learning rate for the 0-based epoch index (the first epoch uses ``lr``)."""
        return self.lr * self.lr_decay**epoch_index

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def seed_override(config: TrainConfig) -> TrainConfig:
    """Apply the CRIBDIAR_SEED environment override, if set."""
    value = os.environ.get(SEED_ENV)
    if value is None or value == "":
        return config
    return TrainConfig.from_dict({**config.to_dict(), "seed": int(value)})


def _table1() -> dict[str, dict]:
    rows: dict[str, dict] = {}
    combos = [("conv", "blstm"), ("conv", "mha"), ("logmel", "blstm"), ("logmel", "mha")]
    groups = [
        (1, dict(cls="linear", pretrain="none", lr=0.001, lr_decay=0.98), False),
        (5, dict(cls="mlp2", pretrain="mil1", lr=0.0005, lr_decay=0.94), True),
        (9, dict(cls="mlp2", pretrain="mil1", lr=0.001, lr_decay=0.98), False),
        (13, dict(cls="linear", pretrain="mil2", lr=0.0005, lr_decay=0.98), True),
        (17, dict(cls="linear", pretrain="mil2", lr=0.0005, lr_decay=0.98), False),
    ]
    for first, base, freeze in groups:
        for offset, (feat, embed) in enumerate(combos):
            row = dict(base, feat=feat, embed=embed)
            if base["pretrain"] != "none":
                load = ["embed"] if feat == "logmel" else ["feat", "embed"]
                if base["pretrain"] == "mil2":
                    load.append("cls")
                row["load_set"] = load
                if freeze:
                    row["freeze_feat_epochs"] = 10 if feat == "conv" else 0
                    row["freeze_embed_epochs"] = 10
            rows[str(first + offset)] = row
    rows["ablation1"] = dict(rows["1"], loss="bce")
    rows["ablation2"] = dict(rows["1"], input_len_s=2.0)
    rows["ablation3"] = dict(rows["5"], input_len_s=2.0)
    rows["4class"] = dict(rows["5"], classes=4)
    return rows


TABLE1 = _table1()


def table1_config(name: str | int, **overrides) -> TrainConfig:
    """A named row of the configuration matrix ("1".."20", "ablation1".."ablation3", "4class")."""
    key = str(name)
    if key not in TABLE1:
        raise KeyError(f"no configuration {key!r}; known: {list(TABLE1)}")
    return TrainConfig.from_dict({**TABLE1[key], **overrides})


# ---------------------------------------------------------------------------
# data


@dataclass
class Recording:
    samples: np.ndarray
    segments: list[TimedSegment]
    name: str = ""

    @property
    def n_samples(self) -> int:
        return int(self.samples.shape[0])


@dataclass
class Chunk:
    samples: np.ndarray
    labels: np.ndarray
    segments: list[TimedSegment]
    source: str = ""


def clip_segments(segments: Sequence[TimedSegment], start_s: float, end_s: float) -> list[TimedSegment]:
    out = []
    for s in segments:
        a, b = max(s.start, start_s), min(s.end, end_s)
        if b > a:
            out.append(TimedSegment(s.label, a - start_s, b - start_s))
    return out


def make_chunks(recordings: Sequence[Recording], input_len_s: float, n_classes: int) -> list[Chunk]:
    """Cut recordings into non-overlapping chunks of whole 256 ms frames; drop the remainder."""
    n = chunk_samples(input_len_s)
    sr = 16000
    chunks = []
    for rec in recordings:
        for k in range(rec.n_samples // n):
            x = rec.samples[k * n : (k + 1) * n]
            segs = merge_classes(clip_segments(rec.segments, k * n / sr, (k + 1) * n / sr), n_classes)
            chunks.append(Chunk(x, rasterize_labels(segs, n, n_classes), segs, f"{rec.name}#{k}"))
    return chunks


def batches(n: int, size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for i in range(0, n, size):
        yield idx[i : i + size]


# ---------------------------------------------------------------------------
# inference


def frames_to_segments(
    active: np.ndarray, n_samples: int, labels: Sequence[str]
) -> list[TimedSegment]:
    """Merge runs of active frames per class into segments; frame l spans [l*T/L, (l+1)*T/L)."""
    active = np.asarray(active, dtype=bool)
    bounds = frame_bounds(n_samples, active.shape[1])
    segments = []
    for c, label in enumerate(labels):
        row = np.concatenate([[False], active[c], [False]]).astype(np.int8)
        edges = np.flatnonzero(np.diff(row))
        for a, b in zip(edges[::2], edges[1::2]):
            segments.append(TimedSegment(label, float(bounds[a, 0]), float(bounds[b - 1, 1])))
    return sorted(segments, key=lambda s: (s.start, s.label))


def binarize(prob: np.ndarray, threshold: float = 0.5, median_width: int = 0) -> np.ndarray:
    active = np.asarray(prob) >= threshold
    if median_width and median_width > 1:
        active = median_filter(active.astype(np.uint8), size=(1, median_width), mode="nearest").astype(bool)
    return active


def predict_proba(model: DiarizationModel, samples: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return model(np.asarray(samples)[None, :]).data[0]


def predict(
    model: DiarizationModel,
    samples: np.ndarray,
    threshold: float = 0.5,
    median_width: int = 0,
    labels: Sequence[str] | None = None,
) -> list[TimedSegment]:
    """Threshold per-frame probabilities and merge active frames into timed segments."""
    labels = labels or class_names(model.n_classes)
    prob = predict_proba(model, samples)
    return frames_to_segments(binarize(prob, threshold, median_width), len(samples), labels)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_der: float
    val_fer: float
    seconds: float


@dataclass
class TrainResult:
    model: DiarizationModel
    history: list[EpochMetrics]
    best_epoch: int
    config: TrainConfig

    def epochs_to(self, der: float, fer: float | None = None) -> int | None:
        """First epoch whose validation metrics meet the targets."""
        for m in self.history:
            if m.val_der < der and (fer is None or m.val_fer < fer):
                return m.epoch
        return None


def write_metrics_csv(path: str | Path, history: Sequence[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_der"])
        for m in history:
            w.writerow([m.epoch, repr(m.train_loss), repr(m.val_loss), repr(m.val_der)])


class _Prepared:
    def __init__(self, model: DiarizationModel, chunks: Sequence[Chunk]):
        self.inputs = model.prepare(np.stack([c.samples for c in chunks]))
        self.labels = np.stack([c.labels for c in chunks]).astype(model.dtype)
        self.chunks = list(chunks)

    def __len__(self):
        return len(self.chunks)


def evaluate(
    model: DiarizationModel,
    data: _Prepared,
    loss_fn,
    batch_size: int,
    threshold: float = 0.5,
    median_width: int = 0,
) -> tuple[float, float, float]:
    """(mean loss, pooled DER, pooled frame error rate) over prepared chunks."""
    labels = class_names(model.n_classes)
    losses, weights = [], []
    err_ms = ref_ms = 0
    wrong = total = 0
    with ad.no_grad():
        for idx in batches(len(data), batch_size):
            p = model.forward_prepared(data.inputs[idx])
            losses.append(loss_fn(p, data.labels[idx]).item())
            weights.append(len(idx))
            for j, i in enumerate(idx):
                chunk = data.chunks[i]
                active = binarize(p.data[j], threshold, median_width)
                hyp = frames_to_segments(active, len(chunk.samples), labels)
                b = der_breakdown(chunk.segments, hyp, labels)
                err_ms += b.error_ms
                ref_ms += b.ref_ms
                wrong += frame_error_rate(chunk.labels, active) * active.shape[1]
                total += active.shape[1]
    val_der = err_ms / ref_ms if ref_ms else float("nan")
    return float(np.average(losses, weights=weights)), val_der, wrong / total


def _snapshot(model: DiarizationModel) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.named_parameters().items()}


def _restore(model: DiarizationModel, snap: Mapping[str, np.ndarray]) -> None:
    for k, v in model.named_parameters().items():
        v.data[...] = snap[k]


def frozen_components(config: TrainConfig, epoch: int) -> set[str]:
    """Components held fixed during 1-based ``epoch``."""
    out = set()
    if epoch <= config.freeze_feat_epochs:
        out.add("feat")
    if epoch <= config.freeze_embed_epochs:
        out.add("embed")
    return out


def train(
    config: TrainConfig,
    train_set: Sequence[Recording],
    val_set: Sequence[Recording],
    archive: Mapping[str, np.ndarray] | None = None,
    callback=None,
) -> TrainResult:
    """Minibatch Adam on the configured loss; returns the best-validation-DER parameters.

    Epoch 0 in the history is an evaluation of the initial parameters.  Epoch
    ``e`` (1-based) trains with ``lr * lr_decay**(e-1)``.  ``callback(epoch, model)``
    runs after each epoch.
    """
    model = DiarizationModel(config.model_spec())
    if config.load_set:
        if archive is None:
            raise ValueError(f"config loads {config.load_set} but no archive was supplied")
        loaded = load_into(model.named_parameters(), archive, config.load_set)
        log.info("loaded %d tensors from archive", len(loaded))
    train_chunks = make_chunks(train_set, config.input_len_s, config.classes)
    val_chunks = make_chunks(val_set, config.input_len_s, config.classes)
    if not train_chunks:
        raise ValueError("training set yields no chunks")
    if not val_chunks:
        raise ValueError("validation set yields no chunks")
    loss_fn = LOSSES[config.loss]
    tr = _Prepared(model, train_chunks)
    va = _Prepared(model, val_chunks)
    params = model.named_parameters()
    opt = Adam(params)
    rng = np.random.default_rng(config.seed)

    t0 = time.perf_counter()
    tr_loss, _, _ = evaluate(model, tr, loss_fn, config.batch_size, config.threshold)
    va_loss, va_der, va_fer = evaluate(model, va, loss_fn, config.batch_size, config.threshold, config.median_width)
    history = [EpochMetrics(0, 0.0, tr_loss, va_loss, va_der, va_fer, time.perf_counter() - t0)]
    best = (math.inf if math.isnan(va_der) else va_der, va_loss)
    best_epoch, best_snap = 0, _snapshot(model)
    if callback:
        callback(0, model)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        lr = config.lr_at(epoch - 1)
        frozen_parts = frozen_components(config, epoch)
        frozen = {k for k in params if k.split(".", 1)[0] in frozen_parts}
        for k, p in params.items():
            p.requires_grad = k not in frozen
        total, count = 0.0, 0
        for idx in batches(len(tr), config.batch_size, rng.permutation(len(tr))):
            loss = loss_fn(model.forward_prepared(tr.inputs[idx]), tr.labels[idx])
            ad.backward(loss)
            opt.step(lr, frozen)
            opt.zero_grad()
            total += loss.item() * len(idx)
            count += len(idx)
        for p in params.values():
            p.requires_grad = True
        va_loss, va_der, va_fer = evaluate(
            model, va, loss_fn, config.batch_size, config.threshold, config.median_width
        )
        m = EpochMetrics(epoch, lr, total / count, va_loss, va_der, va_fer, time.perf_counter() - t0)
        history.append(m)
        log.info(
            "epoch %d lr %.3g train %.5f val %.5f der %.4f fer %.4f (%.1fs)",
            epoch, lr, m.train_loss, va_loss, va_der, va_fer, m.seconds,
        )
        key = (math.inf if math.isnan(va_der) else va_der, va_loss)
        if key < best:
            best, best_epoch, best_snap = key, epoch, _snapshot(model)
        if callback:
            callback(epoch, model)
        if _target_met(config, va_der, va_fer):
            break

    _restore(model, best_snap)
    return TrainResult(model, history, best_epoch, copy.deepcopy(config))


def _target_met(config: TrainConfig, der: float, fer: float) -> bool:
    if config.early_stop_der is None and config.early_stop_fer is None:
        return False
    ok = True
    if config.early_stop_der is not None:
        ok &= der < config.early_stop_der
    if config.early_stop_fer is not None:
        ok &= fer < config.early_stop_fer
    return ok
