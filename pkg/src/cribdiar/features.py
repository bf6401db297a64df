"""Waveform loading, frame arithmetic, log-Mel features and label rasterisation.

Every feature extractor in the package emits one frame per 4096 samples
(256 ms at 16 kHz), so a waveform of ``T`` samples always maps to
``ceil(T / 4096)`` frames.
"""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SAMPLE_RATE = 16000
FRAME_SAMPLES = 4096
FRAME_SECONDS = FRAME_SAMPLES / SAMPLE_RATE

WIN_LENGTH = 400
HOP_LENGTH = 256
N_FFT = 512
N_MELS = 23
SPLICE_CONTEXT = 7
SUBSAMPLE = 16
LOG_FLOOR = 1e-10
LOGMEL_DIM = N_MELS * (2 * SPLICE_CONTEXT + 1)

# Speaker classes.  In 3-class mode key child and other child share one row.
CLASSES_4 = ("CHN", "CXN", "FAN", "MAN")
CLASSES_3 = ("CHI", "FAN", "MAN")
LABEL_MAPS: dict[int, dict[str, int]] = {
    4: {"CHN": 0, "CXN": 1, "FAN": 2, "MAN": 3},
    3: {"CHN": 0, "CXN": 0, "CHI": 0, "FAN": 1, "MAN": 2},
}


def class_names(n_classes: int) -> tuple[str, ...]:
    if n_classes == 3:
        return CLASSES_3
    if n_classes == 4:
        return CLASSES_4
    raise ValueError(f"unsupported class count {n_classes}; expected 3 or 4")


@dataclass(frozen=True)
class TimedSegment:
    """One class active over ``[start, end)`` seconds."""

    label: str
    start: float
    end: float

    def __post_init__(self):
        if not self.start >= 0:
            raise ValueError(f"segment start must be >= 0, got {self.start}")
        if not self.end > self.start:
            raise ValueError(f"segment end {self.end} must exceed start {self.start}")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise ValueError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def peak_normalize(samples: np.ndarray) -> np.ndarray:
    samples = np.asarray(samples, dtype=np.float64)
    peak = np.max(np.abs(samples)) if samples.size else 0.0
    return samples / peak if peak > 0 else samples.copy()


def load_wav(path: str | Path) -> Waveform:
    """Read a 16-bit mono 16 kHz PCM WAV, scale by 1/32768 and peak-normalise."""
    with wave.open(str(path), "rb") as fh:
        if fh.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV ({fh.getcomptype()}) is not supported")
        if fh.getnchannels() != 1:
            raise ValueError(f"{path}: expected 1 channel, got {fh.getnchannels()}")
        if fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit samples, got {8 * fh.getsampwidth()}-bit")
        if fh.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected sample rate {SAMPLE_RATE}, got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(peak_normalize(pcm))


def write_wav(path: str | Path, samples: np.ndarray) -> None:
    """Write samples in [-1, 1] as 16-bit mono PCM at 16 kHz."""
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


def expected_frame_count(n_samples: int) -> int:
    if n_samples < WIN_LENGTH:
        raise ValueError(f"waveform has {n_samples} samples; at least {WIN_LENGTH} (one 25 ms window) required")
    return -(-n_samples // FRAME_SAMPLES)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters with unit peak, equally spaced on the mel scale from 0 Hz to Nyquist."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.clip(np.minimum(rising, falling), 0.0, None)


_MEL = mel_filterbank()
_WINDOW = np.hanning(WIN_LENGTH + 1)[:-1]  # periodic Hann


def logmel_base(samples: np.ndarray) -> np.ndarray:
    """23-band log-Mel energies on the 16 ms hop grid, shape (n_frames, 23)."""
    x = np.asarray(samples, dtype=np.float64)
    n = (x.shape[0] - WIN_LENGTH) // HOP_LENGTH + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:n]
    spec = np.abs(np.fft.rfft(frames * _WINDOW, n=N_FFT, axis=1)) ** 2
    return np.log(spec @ _MEL.T + LOG_FLOOR)


def splice(feats: np.ndarray, context: int = SPLICE_CONTEXT) -> np.ndarray:
    """Stack each frame with ``context`` neighbours per side, replicating edge frames."""
    n = feats.shape[0]
    idx = np.clip(np.arange(n)[:, None] + np.arange(-context, context + 1)[None, :], 0, n - 1)
    return feats[idx].reshape(n, -1)


def logmel(w: Waveform | np.ndarray) -> np.ndarray:
    """Spliced, subsampled log-Mel features of shape (345, ceil(T/4096)).

    When ``T mod 4096`` falls below one analysis window the tail is zero-padded
    just enough for the last 256 ms frame to own a window.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64).reshape(-1)
    n_out = expected_frame_count(x.shape[0])
    need = FRAME_SAMPLES * (n_out - 1) + WIN_LENGTH
    if x.shape[0] < need:
        x = np.concatenate([x, np.zeros(need - x.shape[0])])
    spliced = splice(logmel_base(x))[::SUBSAMPLE]
    assert spliced.shape[0] == n_out
    return spliced.T


def frame_bounds(n_samples: int, n_frames: int | None = None) -> np.ndarray:
    """Start/end times in seconds of each label frame: frame l spans [l*T/L, (l+1)*T/L)."""
    n_frames = expected_frame_count(n_samples) if n_frames is None else n_frames
    edges = np.arange(n_frames + 1) * (n_samples / n_frames) / SAMPLE_RATE
    return np.stack([edges[:-1], edges[1:]], axis=1)


def _resolve_classes(classes: Sequence[str] | Mapping[str, int] | int) -> tuple[dict[str, int], int]:
    if isinstance(classes, int):
        mapping = LABEL_MAPS.get(classes)
        if mapping is None:
            raise ValueError(f"unsupported class count {classes}")
        return dict(mapping), classes
    if isinstance(classes, Mapping):
        return dict(classes), max(classes.values()) + 1
    return {name: i for i, name in enumerate(classes)}, len(classes)


def rasterize_labels(
    segments: Iterable[TimedSegment],
    n_samples: int,
    classes: Sequence[str] | Mapping[str, int] | int,
) -> np.ndarray:
    """Binary (C, L) matrix: y[c, l] = 1 iff a class-c segment overlaps frame l with positive duration."""
    mapping, n_classes = _resolve_classes(classes)
    bounds = frame_bounds(n_samples)
    y = np.zeros((n_classes, bounds.shape[0]), dtype=np.float32)
    for seg in segments:
        row = mapping.get(seg.label)
        if row is None:
            raise ValueError(f"unknown class {seg.label!r}; known: {sorted(mapping)}")
        overlap = np.minimum(bounds[:, 1], seg.end) - np.maximum(bounds[:, 0], seg.start)
        y[row, overlap > 0] = 1.0
    return y


def merge_classes(segments: Iterable[TimedSegment], n_classes: int) -> list[TimedSegment]:
    """Relabel segments onto the ``n_classes`` inventory.

    In 3-class mode CHN and CXN become CHI and overlapping child spans are
    unioned, so the result matches the rows of :func:`rasterize_labels`.
    """
    mapping, _ = _resolve_classes(n_classes)
    names = class_names(n_classes)
    spans: dict[str, list[tuple[float, float]]] = {}
    for seg in segments:
        row = mapping.get(seg.label)
        if row is None:
            raise ValueError(f"unknown class {seg.label!r}; known: {sorted(mapping)}")
        spans.setdefault(names[row], []).append((seg.start, seg.end))
    out = []
    for label, items in spans.items():
        items.sort()
        cur_a, cur_b = items[0]
        for a, b in items[1:]:
            if a <= cur_b:
                cur_b = max(cur_b, b)
            else:
                out.append(TimedSegment(label, cur_a, cur_b))
                cur_a, cur_b = a, b
        out.append(TimedSegment(label, cur_a, cur_b))
    return sorted(out, key=lambda s: (s.start, s.label))


def read_label_csv(path: str | Path) -> list[TimedSegment]:
    """Read ``class,start_s,end_s`` rows (with header)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"class", "start_s", "end_s"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return [TimedSegment(row["class"], float(row["start_s"]), float(row["end_s"])) for row in reader]


def chunk_samples(input_len_s: float) -> int:
    """Samples in a training chunk: the nominal length rounded up to whole 256 ms frames."""
    return FRAME_SAMPLES * math.ceil(round(input_len_s * SAMPLE_RATE) / FRAME_SAMPLES)
