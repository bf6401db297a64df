import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cribdiar.features import (
    FRAME_SAMPLES,
    LOGMEL_DIM,
    N_MELS,
    TimedSegment,
    Waveform,
    chunk_samples,
    expected_frame_count,
    frame_bounds,
    load_wav,
    logmel,
    logmel_base,
    mel_filterbank,
    merge_classes,
    peak_normalize,
    rasterize_labels,
    read_label_csv,
    splice,
    write_wav,
)


def write_raw_wav(path, data: bytes, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(channels)
        fh.setsampwidth(width)
        fh.setframerate(rate)
        fh.writeframes(data)


class TestFrameCounts:
    @pytest.mark.parametrize(
        "n_samples, base, out",
        [(65536, 255, 16), (320000, 1249, 79), (400, 1, 1), (4096, 15, 1), (4097, 15, 2)],
    )
    def test_known_lengths(self, n_samples, base, out):
        x = np.random.default_rng(0).standard_normal(n_samples)
        assert logmel_base(x).shape == (base, N_MELS)
        assert expected_frame_count(n_samples) == out
        assert logmel(x).shape == (LOGMEL_DIM, out)

    def test_too_short_raises(self):
        with pytest.raises(ValueError, match="400"):
            logmel(np.zeros(399))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(400, 200000))
    def test_logmel_frames_match_ceiling(self, n):
        assert logmel(np.zeros(n)).shape[1] == -(-n // FRAME_SAMPLES)

    def test_padding_leaves_earlier_frames_alone(self, rng):
        # 4096 + 100 samples: the last frame needs a zero-padded window
        x = rng.standard_normal(4196)
        full = logmel(np.concatenate([x, np.zeros(8192)]))
        got = logmel(x)
        assert got.shape == (LOGMEL_DIM, 2)
        np.testing.assert_allclose(got[:, 0], full[:, 0], atol=1e-12)


class TestMelAndSplice:
    def test_filterbank_shape_and_peaks(self):
        fb = mel_filterbank()
        assert fb.shape == (23, 257)
        assert np.all(fb >= 0)
        # peaks fall between FFT bins, so the sampled maximum sits a little below 1
        assert np.all(fb.max(axis=1) <= 1.0) and np.all(fb.max(axis=1) > 0.8)

    def test_filterbank_centres_increase(self):
        centres = mel_filterbank().argmax(axis=1)
        assert np.all(np.diff(centres) >= 0)

    def test_tone_lands_in_the_right_band(self):
        t = np.arange(16000) / 16000
        low = logmel_base(np.sin(2 * np.pi * 200 * t)).mean(0)
        high = logmel_base(np.sin(2 * np.pi * 4000 * t)).mean(0)
        assert low.argmax() < high.argmax()

    def test_splice_replicates_edges(self):
        feats = np.arange(12, dtype=float).reshape(4, 3)
        out = splice(feats, context=2)
        assert out.shape == (4, 15)
        np.testing.assert_array_equal(out[0, :3], feats[0])
        np.testing.assert_array_equal(out[0, 6:9], feats[0])
        np.testing.assert_array_equal(out[3, 12:], feats[3])

    def test_log_floor_keeps_silence_finite(self):
        assert np.all(np.isfinite(logmel(np.zeros(8192))))


class TestSegmentsAndLabels:
    def test_segment_validation(self):
        with pytest.raises(ValueError):
            TimedSegment("FAN", 1.0, 1.0)
        with pytest.raises(ValueError):
            TimedSegment("FAN", -0.1, 1.0)
        assert TimedSegment("FAN", 0.5, 2.0).duration == pytest.approx(1.5)

    def test_frame_bounds_partition_the_recording(self):
        b = frame_bounds(4 * FRAME_SAMPLES)
        np.testing.assert_allclose(b[:, 0], [0, 0.256, 0.512, 0.768])
        np.testing.assert_allclose(b[-1, 1], 1.024)

    def test_rasterize_marks_overlapping_frames(self):
        y = rasterize_labels([TimedSegment("FAN", 0.1, 0.3)], 4 * FRAME_SAMPLES, 4)
        np.testing.assert_array_equal(y[2], [1, 1, 0, 0])
        assert y.sum() == 2

    def test_touching_boundary_is_not_overlap(self):
        y = rasterize_labels([TimedSegment("MAN", 0.256, 0.512)], 4 * FRAME_SAMPLES, 4)
        np.testing.assert_array_equal(y[3], [0, 1, 0, 0])

    def test_three_class_rows_union_child_roles(self):
        segs = [TimedSegment("CHN", 0.0, 0.3), TimedSegment("CXN", 0.6, 0.9), TimedSegment("MAN", 0.0, 1.0)]
        y4 = rasterize_labels(segs, 4 * FRAME_SAMPLES, 4)
        y3 = rasterize_labels(segs, 4 * FRAME_SAMPLES, 3)
        np.testing.assert_array_equal(y3[0], np.maximum(y4[0], y4[1]))
        np.testing.assert_array_equal(y3[1:], y4[2:])

    def test_unknown_class_raises(self):
        with pytest.raises(ValueError, match="XYZ"):
            rasterize_labels([TimedSegment("XYZ", 0, 1)], FRAME_SAMPLES, 3)

    def test_explicit_class_list(self):
        y = rasterize_labels([TimedSegment("b", 0, 0.1)], FRAME_SAMPLES, ["a", "b"])
        np.testing.assert_array_equal(y, [[0], [1]])

    def test_merge_classes_unions_overlapping_child_spans(self):
        segs = [TimedSegment("CHN", 0, 2), TimedSegment("CXN", 1, 3), TimedSegment("CXN", 5, 6)]
        assert merge_classes(segs, 3) == [TimedSegment("CHI", 0, 3), TimedSegment("CHI", 5, 6)]
        assert len(merge_classes(segs, 4)) == 3

    def test_label_csv(self, tmp_path):
        p = tmp_path / "labels.csv"
        p.write_text("class,start_s,end_s\nCHN,0.0,1.5\nMAN,2,3\n")
        assert read_label_csv(p) == [TimedSegment("CHN", 0.0, 1.5), TimedSegment("MAN", 2.0, 3.0)]

    @pytest.mark.parametrize("seconds, samples", [(20.0, 323584), (2.0, 32768), (0.256, 4096)])
    def test_chunks_are_whole_frames(self, seconds, samples):
        assert chunk_samples(seconds) == samples


class TestWav:
    def test_round_trip_is_peak_normalised(self, tmp_path, rng):
        x = 0.5 * rng.uniform(-1, 1, 1000)
        write_wav(tmp_path / "a.wav", x)
        w = load_wav(tmp_path / "a.wav")
        assert np.max(np.abs(w.samples)) == pytest.approx(1.0)
        np.testing.assert_allclose(w.samples, peak_normalize(x), atol=2e-4)

    def test_stereo_rejected(self, tmp_path):
        write_raw_wav(tmp_path / "s.wav", b"\x00\x00" * 20, channels=2)
        with pytest.raises(ValueError, match="channel"):
            load_wav(tmp_path / "s.wav")

    def test_wrong_rate_rejected(self, tmp_path):
        write_raw_wav(tmp_path / "r.wav", b"\x00\x00" * 20, rate=44100)
        with pytest.raises(ValueError, match="44100"):
            load_wav(tmp_path / "r.wav")

    def test_wrong_depth_rejected(self, tmp_path):
        write_raw_wav(tmp_path / "d.wav", b"\x00" * 20, width=1)
        with pytest.raises(ValueError, match="8-bit"):
            load_wav(tmp_path / "d.wav")

    def test_waveform_requires_16k(self):
        with pytest.raises(ValueError):
            Waveform(np.zeros(10), sample_rate=8000)

    def test_silence_stays_silent(self):
        np.testing.assert_array_equal(peak_normalize(np.zeros(5)), np.zeros(5))
