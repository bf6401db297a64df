"""Multiple-instance pre-training from coarsely labelled speaker turns.

Two graphs share the diarization model's feature extractor and embedder:

* MIL1: softmax(maxpool_t(classify(embed(feat(x)))))
* MIL2: softmax(classify(maxpool_t(embed(feat(x)))))

Both are trained with categorical cross-entropy against the bag's class.
Only positive bags are used: a softmax head cannot produce the all-zero
target.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import SAMPLE_RATE, WIN_LENGTH, load_wav
from .models import DiarizationModel, ModelSpec
from .training import Adam

log = logging.getLogger(__name__)

PRETRAIN_CLASSES = ("child", "female", "male")
BAG_LABELS = {
    "CHN": 0, "CXN": 0, "CHI": 0, "child": 0,
    "FAN": 1, "female": 1,
    "MAN": 2, "male": 2,
}
MIN_BAG_S = 1.28
MAX_BAG_S = 10.24
VARIANTS = ("mil1", "mil2")


@dataclass
class Bag:
    samples: np.ndarray
    label: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.shape[0] < WIN_LENGTH:
            raise ValueError(f"bag has {self.samples.shape[0]} samples, fewer than one frame window ({WIN_LENGTH})")
        if not 0 <= self.label < len(PRETRAIN_CLASSES):
            raise ValueError(f"bag label {self.label} outside 0..{len(PRETRAIN_CLASSES) - 1}")


@dataclass
class SegmentRef:
    """A labelled time span inside a source waveform."""

    audio: np.ndarray
    label: str | int
    start: float
    end: float


def bag_label(label: str | int) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    try:
        return BAG_LABELS[label]
    except KeyError:
        raise ValueError(f"unknown bag class {label!r}") from None


def filter_bags(
    segments: Iterable[SegmentRef], min_s: float = MIN_BAG_S, max_s: float = MAX_BAG_S
) -> tuple[list[Bag], int]:
    """Keep segments whose duration lies in [min_s, max_s] (inclusive).

    Returns the bags and the number of dropped segments.
    """
    bags, dropped = [], 0
    for seg in segments:
        dur = seg.end - seg.start
        if dur < min_s - 1e-9 or dur > max_s + 1e-9:
            dropped += 1
            continue
        a = int(round(seg.start * SAMPLE_RATE))
        b = int(round(seg.end * SAMPLE_RATE))
        bags.append(Bag(np.asarray(seg.audio)[a:b], bag_label(seg.label)))
    if dropped:
        log.info("dropped %d of %d segments outside [%.2f, %.2f] s", dropped, dropped + len(bags), min_s, max_s)
    return bags, dropped


def read_bag_manifest(path: str | Path) -> list[SegmentRef]:
    """Read ``wav_path,class,start_s,end_s`` rows; relative paths resolve against the manifest."""
    path = Path(path)
    cache: dict[Path, np.ndarray] = {}
    refs = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"wav_path", "class", "start_s", "end_s"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            wav = Path(row["wav_path"])
            wav = wav if wav.is_absolute() else path.parent / wav
            if wav not in cache:
                cache[wav] = load_wav(wav).samples
            refs.append(SegmentRef(cache[wav], row["class"], float(row["start_s"]), float(row["end_s"])))
    return refs


def load_bags(path: str | Path, min_s: float = MIN_BAG_S, max_s: float = MAX_BAG_S) -> list[Bag]:
    return filter_bags(read_bag_manifest(path), min_s, max_s)[0]


def build_mil_model(
    variant: str, feat: str, embed: str, cls: str = "linear", profile: str = "desk", seed: int = 0, dtype="float32"
) -> DiarizationModel:
    """Model whose classifier has the three pre-training classes.  MIL2 always uses a linear head."""
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == "mil2":
        cls = "linear"
    return DiarizationModel(ModelSpec(feat, embed, cls, len(PRETRAIN_CLASSES), profile, seed, dtype))


def mil_forward(variant: str, model: DiarizationModel, inputs) -> Tensor:
    """Class distribution (batch, 3) for prepared inputs (see ``DiarizationModel.prepare``)."""
    emb = model.embed(model.features(inputs))
    if variant == "mil1":
        pooled = ad.max_pool_over_time(model.cls(emb), axis=1)
    elif variant == "mil2":
        pooled = model.cls(ad.max_pool_over_time(emb, axis=1))
    else:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    return ad.softmax(pooled, axis=-1)


def cross_entropy(probs: Tensor, labels: Sequence[int]) -> Tensor:
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return -ad.mean(ad.sum(ad.log(probs + 1e-10) * onehot, axis=-1))


def bag_accuracy(variant: str, model: DiarizationModel, bags: Sequence[Bag]) -> float:
    if not bags:
        return float("nan")
    hits = 0
    with ad.no_grad():
        for bag in bags:
            p = mil_forward(variant, model, model.prepare(bag.samples))
            hits += int(np.argmax(p.data[0]) == bag.label)
    return hits / len(bags)


@dataclass
class PretrainResult:
    model: DiarizationModel
    archive: dict[str, np.ndarray]
    val_accuracy: float
    losses: list[float]


def mil_pretrain(
    variant: str,
    feat: str,
    embed: str,
    bags: Sequence[Bag],
    val_bags: Sequence[Bag] = (),
    lr: float = 0.0005,
    decay: float = 0.5,
    epochs: int = 5,
    cls: str = "linear",
    profile: str = "desk",
    seed: int = 0,
) -> PretrainResult:
    """Adam on bag cross-entropy, one bag per step, lr multiplied by ``decay`` after each epoch.

    The returned archive holds ``feat.*`` and ``embed.*`` and, for MIL2, ``cls.*``.
    """
    if not bags:
        raise ValueError("no bags to train on")
    model = build_mil_model(variant, feat, embed, cls, profile, seed)
    inputs = [model.prepare(b.samples) for b in bags]
    labels = [b.label for b in bags]
    opt = Adam(model.named_parameters())
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        step_lr = lr * decay**epoch
        total = 0.0
        for i in rng.permutation(len(bags)):
            loss = cross_entropy(mil_forward(variant, model, inputs[i]), [labels[i]])
            ad.backward(loss)
            opt.step(step_lr)
            opt.zero_grad()
            total += loss.item()
        losses.append(total / len(bags))
        log.info("mil %s epoch %d lr %.3g loss %.4f", variant, epoch + 1, step_lr, losses[-1])
    keep = ("feat.", "embed.", "cls.") if variant == "mil2" else ("feat.", "embed.")
    archive = {k: v.data.copy() for k, v in model.named_parameters().items() if k.startswith(keep)}
    acc = bag_accuracy(variant, model, val_bags)
    return PretrainResult(model, archive, acc, losses)
