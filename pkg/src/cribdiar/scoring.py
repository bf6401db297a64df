"""Diarization error rate, frame error rate and RTTM I/O.

Classes are fixed roles, so hypothesis classes are compared to reference
classes by name (no speaker mapping).  There is no collar and overlapping
speech is scored.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .features import TimedSegment


class RttmError(ValueError):
    pass


def _ms(t: float) -> int:
    return int(round(t * 1000.0))


def _union_ms(segments: Iterable[TimedSegment]) -> dict[str, np.ndarray]:
    """Per-class disjoint active intervals in integer milliseconds, shape (n, 2)."""
    by_class: dict[str, list[tuple[int, int]]] = {}
    for seg in segments:
        s, e = _ms(seg.start), _ms(seg.end)
        if e > s:
            by_class.setdefault(seg.label, []).append((s, e))
    merged = {}
    for label, spans in by_class.items():
        spans.sort()
        out = [list(spans[0])]
        for s, e in spans[1:]:
            if s <= out[-1][1]:
                out[-1][1] = max(out[-1][1], e)
            else:
                out.append([s, e])
        merged[label] = np.asarray(out, dtype=np.int64)
    return merged


def _activity(spans: np.ndarray | None, points: np.ndarray) -> np.ndarray:
    if spans is None:
        return np.zeros(points.shape, dtype=bool)
    idx = np.searchsorted(spans[:, 0], points, side="right") - 1
    ok = idx >= 0
    active = np.zeros(points.shape, dtype=bool)
    active[ok] = spans[idx[ok], 1] > points[ok]
    return active


@dataclass
class DerBreakdown:
    """Integer-millisecond totals behind one DER value."""

    error_ms: int
    ref_ms: int
    miss_ms: int
    false_alarm_ms: int
    confusion_ms: int
    per_class: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def der(self) -> float:
        if self.ref_ms == 0:
            raise ZeroDivisionError("DER undefined: reference contains no speech")
        return self.error_ms / self.ref_ms


def der_breakdown(
    ref: Iterable[TimedSegment], hyp: Iterable[TimedSegment], classes: Sequence[str] | None = None
) -> DerBreakdown:
    """Partition the timeline at every boundary and accumulate
    dur * (max(N_ref, N_hyp) - N_correct) and dur * N_ref over regions."""
    ref_u, hyp_u = _union_ms(ref), _union_ms(hyp)
    labels = list(classes) if classes is not None else sorted(set(ref_u) | set(hyp_u))
    for extra in sorted((set(ref_u) | set(hyp_u)) - set(labels)):
        labels.append(extra)
    bounds = [np.zeros(0, dtype=np.int64)]
    for spans in list(ref_u.values()) + list(hyp_u.values()):
        bounds.append(spans.ravel())
    edges = np.unique(np.concatenate(bounds))
    per_class = {c: {"miss_ms": 0, "false_alarm_ms": 0, "confusion_ms": 0} for c in labels}
    if edges.size < 2:
        return DerBreakdown(0, 0, 0, 0, 0, per_class)
    starts, durs = edges[:-1], np.diff(edges)
    r = np.stack([_activity(ref_u.get(c), starts) for c in labels])
    h = np.stack([_activity(hyp_u.get(c), starts) for c in labels])
    n_ref, n_hyp = r.sum(0), h.sum(0)
    n_correct = (r & h).sum(0)
    only_ref, only_hyp = r & ~h, h & ~r
    n_conf = np.minimum(n_ref, n_hyp) - n_correct
    # pair the first n_conf reference-only classes of each region with hypothesis-only ones
    ref_rank = np.cumsum(only_ref, axis=0)
    hyp_rank = np.cumsum(only_hyp, axis=0)
    conf_ref = only_ref & (ref_rank <= n_conf)
    conf_hyp = only_hyp & (hyp_rank <= n_conf)
    for i, c in enumerate(labels):
        per_class[c]["confusion_ms"] = int((durs * conf_ref[i]).sum())
        per_class[c]["miss_ms"] = int((durs * (only_ref[i] & ~conf_ref[i])).sum())
        per_class[c]["false_alarm_ms"] = int((durs * (only_hyp[i] & ~conf_hyp[i])).sum())
    return DerBreakdown(
        error_ms=int((durs * (np.maximum(n_ref, n_hyp) - n_correct)).sum()),
        ref_ms=int((durs * n_ref).sum()),
        miss_ms=int((durs * np.maximum(n_ref - n_hyp, 0)).sum()),
        false_alarm_ms=int((durs * np.maximum(n_hyp - n_ref, 0)).sum()),
        confusion_ms=int((durs * n_conf).sum()),
        per_class=per_class,
    )


def der(ref: Iterable[TimedSegment], hyp: Iterable[TimedSegment], classes: Sequence[str] | None = None) -> float:
    """Diarization error rate with identity class mapping, no collar, overlaps scored."""
    return der_breakdown(ref, hyp, classes).der


def der_frame_oracle(
    ref: Sequence[TimedSegment], hyp: Sequence[TimedSegment], resolution_s: float = 0.001
) -> float:
    """Brute-force DER on a dense grid: a frame is active when its centre lies in a segment."""
    labels = sorted({s.label for s in ref} | {s.label for s in hyp})
    end = max([s.end for s in ref] + [s.end for s in hyp] + [0.0])
    n = int(np.ceil(end / resolution_s)) + 1
    centres = (np.arange(n) + 0.5) * resolution_s
    row = {c: i for i, c in enumerate(labels)}

    def raster(segs):
        grid = np.zeros((len(labels), n), dtype=bool)
        for s in segs:
            grid[row[s.label]] |= (centres >= s.start) & (centres < s.end)
        return grid

    r, h = raster(ref), raster(hyp)
    n_ref, n_hyp, n_cor = r.sum(0), h.sum(0), (r & h).sum(0)
    return float((np.maximum(n_ref, n_hyp) - n_cor).sum() / n_ref.sum())


def frame_error_rate(ref: np.ndarray, hyp: np.ndarray) -> float:
    """Fraction of frames where at least one class bit differs; inputs are (C, L)."""
    ref, hyp = np.asarray(ref), np.asarray(hyp)
    if ref.shape != hyp.shape:
        raise ValueError(f"frame_error_rate: shape mismatch {ref.shape} vs {hyp.shape}")
    if ref.ndim != 2 or ref.shape[1] == 0:
        raise ValueError(f"frame_error_rate: expected a non-empty (C, L) matrix, got {ref.shape}")
    return float(np.any(ref.astype(bool) != hyp.astype(bool), axis=0).mean())


@dataclass
class ScoreReport:
    der: float
    frame_error_rate: float
    miss_s: float
    false_alarm_s: float
    confusion_s: float
    reference_s: float
    per_class: dict[str, dict[str, float]]

    @classmethod
    def from_breakdown(cls, b: DerBreakdown, fer: float) -> "ScoreReport":
        per_class = {c: {k.replace("_ms", "_s"): v / 1000.0 for k, v in d.items()} for c, d in b.per_class.items()}
        return cls(
            der=b.der,
            frame_error_rate=fer,
            miss_s=b.miss_ms / 1000.0,
            false_alarm_s=b.false_alarm_ms / 1000.0,
            confusion_s=b.confusion_ms / 1000.0,
            reference_s=b.ref_ms / 1000.0,
            per_class=per_class,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        lines = [
            f"DER               {self.der:8.4f}",
            f"frame error rate  {self.frame_error_rate:8.4f}",
            f"reference speech  {self.reference_s:8.3f} s",
            "",
            f"{'class':<8}{'miss_s':>10}{'fa_s':>10}{'conf_s':>10}",
        ]
        for c, d in self.per_class.items():
            lines.append(f"{c:<8}{d['miss_s']:>10.3f}{d['false_alarm_s']:>10.3f}{d['confusion_s']:>10.3f}")
        lines.append(f"{'total':<8}{self.miss_s:>10.3f}{self.false_alarm_s:>10.3f}{self.confusion_s:>10.3f}")
        return "\n".join(lines)


def read_rttm(path: str | Path) -> list[TimedSegment]:
    """Parse SPEAKER lines of an RTTM file.  Other line types and comments are skipped."""
    segments = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields or fields[0].startswith("#") or fields[0] != "SPEAKER":
                continue
            if len(fields) < 8:
                raise RttmError(f"{path}:{lineno}: expected at least 8 fields, got {len(fields)}")
            try:
                onset, dur = float(fields[3]), float(fields[4])
            except ValueError:
                raise RttmError(f"{path}:{lineno}: onset/duration are not numbers") from None
            if not dur > 0:
                raise RttmError(f"{path}:{lineno}: duration must be positive, got {dur}")
            if not onset >= 0:
                raise RttmError(f"{path}:{lineno}: onset must be non-negative, got {onset}")
            segments.append(TimedSegment(fields[7], onset, onset + dur))
    return segments


def write_rttm(path: str | Path, segments: Iterable[TimedSegment], file_id: str = "rec") -> None:
    with open(path, "w") as fh:
        fh.write(format_rttm(segments, file_id))


def format_rttm(segments: Iterable[TimedSegment], file_id: str = "rec") -> str:
    rows = sorted(segments, key=lambda s: (s.start, s.label, s.end))
    return "".join(
        f"SPEAKER {file_id} 1 {s.start:.3f} {s.end - s.start:.3f} <NA> <NA> {s.label} <NA> <NA>\n" for s in rows
    )
