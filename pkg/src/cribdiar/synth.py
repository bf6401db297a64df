"""Deterministic synthetic corpus with exact ground truth.

Four speaker roles are rendered as pitch-separated voiced sounds plus
band-limited noise: key child (FM sweeps, 700-1200 Hz), other child (FM
sweeps, 400-650 Hz), female (200-350 Hz harmonic tone) and male (85-180 Hz
harmonic tone).  Event boundaries sit on the 256 ms frame grid, so the RTTM
describes the audio frame-exactly.  A separate "pretrain" split provides
MIL bags whose boundaries are jittered by up to +/-0.3 s.

Layout written by :func:`synth_generate`::

    <out>/spec.json
    <out>/{train,val,test,pretrain}/clip_000.wav, clip_000.rttm, ...
    <out>/pretrain/bags_train.csv, bags_val.csv
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import (
    CLASSES_4,
    FRAME_SAMPLES,
    SAMPLE_RATE,
    TimedSegment,
    load_wav,
    peak_normalize,
    read_label_csv,
    write_wav,
)
from .scoring import read_rttm, write_rttm
from .training import Recording

SPLITS = ("train", "val", "test", "pretrain")

# (pitch low, pitch high, noise band low, noise band high) in Hz
VOICES = {
    "CHN": (700.0, 1200.0, 700.0, 2400.0),
    "CXN": (400.0, 650.0, 400.0, 1300.0),
    "FAN": (200.0, 350.0, 200.0, 1000.0),
    "MAN": (85.0, 180.0, 85.0, 540.0),
}


@dataclass
class SynthSpec:
    seed: int = 0
    num_train: int = 60
    num_val: int = 10
    num_test: int = 10
    num_pretrain: int = 120
    clip_len_s: float = 20.0
    event_rate: float = 0.4
    dur_frames: tuple[int, int] = (3, 12)
    bag_dur_frames: tuple[int, int] = (6, 24)
    overlap_prob: float = 0.15
    bag_jitter_s: float = 0.3
    pretrain_val_fraction: float = 0.3
    noise_floor: float = 0.003
    speakers: tuple[str, ...] = field(default=CLASSES_4)

    def __post_init__(self):
        self.dur_frames = tuple(self.dur_frames)
        self.bag_dur_frames = tuple(self.bag_dur_frames)
        self.speakers = tuple(self.speakers)
        unknown = set(self.speakers) - set(VOICES)
        if unknown:
            raise ValueError(f"no voice for speakers {sorted(unknown)}")
        if not 0 <= self.overlap_prob <= 1 or self.event_rate < 0:
            raise ValueError("overlap_prob must be in [0, 1] and event_rate non-negative")
        if self.dur_frames[0] < 1 or self.dur_frames[1] < self.dur_frames[0]:
            raise ValueError("dur_frames must be an increasing pair of positive ints")

    @property
    def clip_frames(self) -> int:
        return math.ceil(round(self.clip_len_s * SAMPLE_RATE) / FRAME_SAMPLES)

    def split_sizes(self) -> dict[str, int]:
        return {"train": self.num_train, "val": self.num_val, "test": self.num_test, "pretrain": self.num_pretrain}


def _band_noise(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(x * x)) or 1.0
    return x / rms


def render_voice(label: str, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` samples of one vocal event with 10 ms raised-cosine fades."""
    lo, hi, nlo, nhi = VOICES[label]
    t = np.arange(n) / SAMPLE_RATE
    if label in ("CHN", "CXN"):
        centre, half = (lo + hi) / 2, (hi - lo) / 2
        rate = rng.uniform(1.5, 4.0)
        inst = centre + half * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
        partials = [(1, 1.0), (2, 0.35)]
    else:
        f0 = rng.uniform(lo, hi)
        inst = f0 * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(4.0, 6.0) * t))
        partials = [(k, 1.0 / k) for k in range(1, 5 if label == "FAN" else 9)]
    phase = 2 * np.pi * np.cumsum(inst) / SAMPLE_RATE
    x = sum(a * np.sin(k * phase) for k, a in partials)
    x = x / np.sqrt(np.mean(x * x)) + 0.15 * _band_noise(rng, n, nlo, nhi)
    fade = min(160, n // 2)
    if fade:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade) / fade)
        x[:fade] *= ramp
        x[n - fade :] *= ramp[::-1]
    return rng.uniform(0.4, 1.0) * x / np.max(np.abs(x))


def _timeline(rng, n_frames, speakers, dur_range, overlap_prob, event_rate) -> list[tuple[str, int, int]]:
    """(label, start_frame, end_frame) events on the frame grid."""

    def gap() -> float:
        if event_rate <= 0:
            return math.inf
        return max(1, int(round(rng.exponential(1.0 / event_rate) * SAMPLE_RATE / FRAME_SAMPLES)))

    events = []
    t = gap()
    while t < n_frames:
        label = speakers[rng.integers(len(speakers))]
        end = min(t + int(rng.integers(dur_range[0], dur_range[1] + 1)), n_frames)
        events.append((label, t, end))
        last = end
        if overlap_prob > 0 and len(speakers) > 1 and rng.random() < overlap_prob:
            others = [s for s in speakers if s != label]
            other = others[rng.integers(len(others))]
            s2 = int(rng.integers(t, end))
            e2 = min(s2 + int(rng.integers(dur_range[0], dur_range[1] + 1)), n_frames)
            events.append((other, s2, e2))
            last = max(last, e2)
        t = last + gap()
    return events


def synth_clip(
    rng: np.random.Generator, spec: SynthSpec, dur_range=None, overlap_prob=None
) -> tuple[np.ndarray, list[TimedSegment]]:
    n_frames = spec.clip_frames
    n = n_frames * FRAME_SAMPLES
    events = _timeline(
        rng,
        n_frames,
        spec.speakers,
        dur_range or spec.dur_frames,
        spec.overlap_prob if overlap_prob is None else overlap_prob,
        spec.event_rate,
    )
    x = spec.noise_floor * rng.standard_normal(n)
    segments = []
    for label, a, b in events:
        s0, s1 = a * FRAME_SAMPLES, b * FRAME_SAMPLES
        x[s0:s1] += render_voice(label, s1 - s0, rng)
        segments.append(TimedSegment(label, s0 / SAMPLE_RATE, s1 / SAMPLE_RATE))
    # quantise exactly as the WAV writer will, so in-memory and on-disk corpora agree
    x = np.round(peak_normalize(x) * 32767.0) / 32767.0
    return peak_normalize(x), sorted(segments, key=lambda s: (s.start, s.label))


def generate_split(spec: SynthSpec, split: str) -> list[Recording]:
    """In-memory recordings of one split (same content :func:`synth_generate` writes)."""
    count = spec.split_sizes()[split]
    rng = np.random.default_rng([spec.seed, SPLITS.index(split)])
    recs = []
    for i in range(count):
        if split == "pretrain":
            x, segs = synth_clip(rng, spec, dur_range=spec.bag_dur_frames, overlap_prob=0.0)
        else:
            x, segs = synth_clip(rng, spec)
        recs.append(Recording(x, segs, f"clip_{i:03d}"))
    return recs


def jittered_bags(
    spec: SynthSpec, recordings: list[Recording], stream: int = 0
) -> list[tuple[str, str, float, float]]:
    """(wav name, class, start_s, end_s) with each boundary moved by U(-jitter, +jitter)."""
    rng = np.random.default_rng([spec.seed, 99, stream])
    rows = []
    for rec in recordings:
        dur = rec.n_samples / SAMPLE_RATE
        for seg in rec.segments:
            a = min(max(seg.start + rng.uniform(-spec.bag_jitter_s, spec.bag_jitter_s), 0.0), dur)
            b = min(max(seg.end + rng.uniform(-spec.bag_jitter_s, spec.bag_jitter_s), 0.0), dur)
            if b - a > 0.001:
                rows.append((f"{rec.name}.wav", seg.label, round(a, 3), round(b, 3)))
    return rows


def synth_generate(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Write the corpus; identical specs produce byte-identical files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n")
    for split in SPLITS:
        d = out / split
        d.mkdir(exist_ok=True)
        recs = generate_split(spec, split)
        for rec in recs:
            write_wav(d / f"{rec.name}.wav", rec.samples)
            write_rttm(d / f"{rec.name}.rttm", rec.segments, file_id=rec.name)
        if split == "pretrain":
            n_val = int(round(len(recs) * spec.pretrain_val_fraction))
            cut = len(recs) - n_val
            parts = (("bags_train.csv", recs[:cut]), ("bags_val.csv", recs[cut:]))
            for stream, (name, part) in enumerate(parts):
                with open(d / name, "w", newline="") as fh:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(["wav_path", "class", "start_s", "end_s"])
                    for row in jittered_bags(spec, part, stream):
                        w.writerow([row[0], row[1], f"{row[2]:.3f}", f"{row[3]:.3f}"])
    return out


def load_split(directory: str | Path) -> list[Recording]:
    """Recordings from ``*.wav`` files with a sibling ``.rttm`` (or ``.csv``) label file."""
    recs = []
    for wav in sorted(Path(directory).glob("*.wav")):
        rttm, table = wav.with_suffix(".rttm"), wav.with_suffix(".csv")
        if rttm.exists():
            segs = read_rttm(rttm)
        elif table.exists():
            segs = read_label_csv(table)
        else:
            raise FileNotFoundError(f"no .rttm or .csv labels for {wav}")
        recs.append(Recording(load_wav(wav).samples, segs, wav.stem))
    return recs
