import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cribdiar.features import TimedSegment as Seg
from cribdiar.scoring import (
    RttmError,
    ScoreReport,
    der,
    der_breakdown,
    der_frame_oracle,
    frame_error_rate,
    read_rttm,
    write_rttm,
)

LABELS = ["CHI", "FEM", "MAL"]


def random_segments(rng, n, total=10.0):
    out = []
    for _ in range(n):
        a = round(rng.uniform(0, total - 0.1), 3)
        b = round(min(total, a + rng.uniform(0.05, 3.0)), 3)
        out.append(Seg(str(rng.choice(LABELS)), a, b))
    return out


def boundary_count(*groups):
    return len({t for g in groups for s in g for t in (s.start, s.end)})


class TestHandCases:
    def test_identity(self):
        ref = [Seg("CHI", 0, 10), Seg("FEM", 3, 4)]
        assert der(ref, ref) == 0.0

    def test_partial_miss(self):
        assert abs(der([Seg("CHI", 0, 10)], [Seg("CHI", 0, 8)]) - 0.2) <= 1e-12

    def test_full_confusion(self):
        b = der_breakdown([Seg("CHI", 0, 10)], [Seg("FEM", 0, 10)])
        assert abs(b.der - 1.0) <= 1e-12
        assert b.confusion_ms == 10000 and b.miss_ms == 0 and b.false_alarm_ms == 0
        assert b.per_class["CHI"]["confusion_ms"] == 10000

    def test_empty_hypothesis_is_all_miss(self):
        assert der([Seg("CHI", 0, 3), Seg("MAL", 1, 2)], []) == 1.0

    def test_spurious_class_is_false_alarm(self):
        ref = [Seg("CHI", 0, 5)]
        b = der_breakdown(ref, ref + [Seg("MAL", 0, 5)])
        assert b.false_alarm_ms == 5000 and b.miss_ms == 0 and b.confusion_ms == 0
        assert b.der == 1.0

    def test_overlap_counts_twice_in_the_denominator(self):
        ref = [Seg("CHI", 0, 2), Seg("FEM", 0, 2)]
        assert der(ref, [Seg("CHI", 0, 2)]) == 0.5

    def test_der_may_exceed_one(self):
        assert der([Seg("CHI", 0, 1)], [Seg("CHI", 0, 1), Seg("FEM", 0, 5)]) == 5.0

    def test_empty_reference(self):
        with pytest.raises(ZeroDivisionError):
            der([], [Seg("CHI", 0, 1)])

    def test_same_class_overlaps_are_unioned(self):
        assert der([Seg("CHI", 0, 2), Seg("CHI", 1, 3)], [Seg("CHI", 0, 3)]) == 0.0


class TestOracle:
    def test_agrees_on_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            ref = random_segments(rng, int(rng.integers(1, 6)))
            hyp = random_segments(rng, int(rng.integers(0, 6)))
            assert abs(der(ref, hyp) - der_frame_oracle(ref, hyp)) <= 0.002

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_split_segment_is_harmless(self, seed):
        rng = np.random.default_rng(seed)
        ref = random_segments(rng, 4)
        hyp = random_segments(rng, 4)
        s = hyp[0]
        cut = round((s.start + s.end) / 2, 3)
        if not s.start < cut < s.end:
            return
        split = [Seg(s.label, s.start, cut), Seg(s.label, cut, s.end)] + hyp[1:]
        assert der(ref, hyp) == der(ref, split)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_swap_keeps_the_numerator(self, seed):
        rng = np.random.default_rng(seed)
        ref, hyp = random_segments(rng, 3), random_segments(rng, 3)
        assert der_breakdown(ref, hyp).error_ms == der_breakdown(hyp, ref).error_ms

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_within_the_boundary_bound(self, seed):
        rng = np.random.default_rng(seed)
        ref, hyp = random_segments(rng, 4), random_segments(rng, 4)
        total = der_breakdown(ref, hyp).ref_ms / 1000
        bound = 2 * 0.001 * boundary_count(ref, hyp) / total
        assert abs(der(ref, hyp) - der_frame_oracle(ref, hyp)) <= bound + 1e-12


class TestFrameError:
    def test_identical(self, rng):
        x = rng.random((3, 20)) < 0.5
        assert frame_error_rate(x, x) == 0.0

    def test_frame_counted_once(self):
        ref = np.zeros((3, 4))
        hyp = ref.copy()
        hyp[:2, 1] = 1
        assert frame_error_rate(ref, hyp) == 0.25

    def test_matches_column_loop(self, rng):
        a, b = rng.random((4, 50)) < 0.3, rng.random((4, 50)) < 0.3
        slow = sum(any(a[c, l] != b[c, l] for c in range(4)) for l in range(50)) / 50
        assert frame_error_rate(a, b) == pytest.approx(slow)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            frame_error_rate(np.zeros((3, 4)), np.zeros((3, 5)))


class TestRttm:
    def test_round_trip(self, tmp_path, rng):
        segs = sorted(random_segments(rng, 8), key=lambda s: (s.start, s.label, s.end))
        write_rttm(tmp_path / "a.rttm", segs, "clip")
        back = read_rttm(tmp_path / "a.rttm")
        assert [s.label for s in back] == [s.label for s in segs]
        np.testing.assert_allclose([s.start for s in back], [s.start for s in segs], atol=5e-4)
        np.testing.assert_allclose([s.duration for s in back], [s.duration for s in segs], atol=1e-3)

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.rttm").write_text("")
        assert read_rttm(tmp_path / "e.rttm") == []

    def test_other_lines_skipped(self, tmp_path):
        (tmp_path / "x.rttm").write_text("# comment\nSPKR-INFO f 1 <NA> <NA> <NA> unknown A <NA>\n")
        assert read_rttm(tmp_path / "x.rttm") == []

    @pytest.mark.parametrize(
        "line, msg",
        [
            ("SPEAKER f 1 0.0 0.0 <NA> <NA> CHI <NA> <NA>", "duration"),
            ("SPEAKER f 1 0.0 -1 <NA> <NA> CHI <NA> <NA>", "duration"),
            ("SPEAKER f 1 zero 1 <NA> <NA> CHI <NA> <NA>", "numbers"),
            ("SPEAKER f 1 0.0", "fields"),
        ],
    )
    def test_malformed_lines_name_the_line(self, tmp_path, line, msg):
        (tmp_path / "b.rttm").write_text("SPEAKER f 1 0.0 1.0 <NA> <NA> CHI <NA> <NA>\n" + line + "\n")
        with pytest.raises(RttmError, match=rf":2: .*{msg}"):
            read_rttm(tmp_path / "b.rttm")


def test_report_json_and_table():
    b = der_breakdown([Seg("CHI", 0, 10)], [Seg("CHI", 0, 8)], LABELS)
    report = ScoreReport.from_breakdown(b, 0.1)
    data = json.loads(report.to_json())
    assert data["der"] == pytest.approx(0.2) and data["miss_s"] == 2.0
    assert set(data["per_class"]) == set(LABELS)
    assert "DER" in report.table() and "MAL" in report.table()
