import numpy as np
import pytest

from cribdiar import archive as arc
from cribdiar import autodiff as ad
from cribdiar.features import FRAME_SAMPLES, SAMPLE_RATE, write_wav
from cribdiar.mil import (
    Bag,
    SegmentRef,
    bag_accuracy,
    bag_label,
    build_mil_model,
    cross_entropy,
    filter_bags,
    load_bags,
    mil_forward,
    mil_pretrain,
)
from cribdiar.models import DiarizationModel, ModelSpec
from cribdiar.training import table1_config


def tiny(variant, feat="logmel", embed="blstm", cls="linear"):
    return build_mil_model(variant, feat, embed, cls, profile="tiny", dtype="float64")


class TestForward:
    @pytest.mark.parametrize("variant", ["mil1", "mil2"])
    def test_outputs_are_distributions(self, rng, variant):
        model = tiny(variant)
        p = mil_forward(variant, model, model.prepare(rng.uniform(-1, 1, 3 * FRAME_SAMPLES))).data
        assert p.shape == (1, 3)
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)

    def test_single_frame_variants_agree(self, rng):
        model = tiny("mil1")
        x = model.prepare(rng.uniform(-1, 1, 2000))
        np.testing.assert_allclose(
            mil_forward("mil1", model, x).data, mil_forward("mil2", model, x).data, atol=1e-12
        )

    @pytest.mark.parametrize("variant", ["mil1", "mil2"])
    def test_pooled_output_ignores_frame_order(self, rng, variant):
        # permute the post-feature sequence; an MHA embedder without positions keeps equivariance
        model = tiny(variant, embed="mha")
        x = model.prepare(rng.uniform(-1, 1, 6 * FRAME_SAMPLES))
        perm = rng.permutation(x.shape[1])
        a = mil_forward(variant, model, x).data
        b = mil_forward(variant, model, x[:, perm]).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    @pytest.mark.parametrize("variant", ["mil1", "mil2"])
    def test_appending_frames_never_lowers_the_pool(self, rng, variant):
        # the classifier is frame-local, so extending the embedded sequence only adds candidates
        model = tiny(variant)
        with ad.no_grad():
            emb = model.embed(ad.Tensor(model.prepare(rng.uniform(-1, 1, 6 * FRAME_SAMPLES))))
            seq = model.cls(emb) if variant == "mil1" else emb
            short = ad.max_pool_over_time(ad.narrow(seq, 1, 0, 3), axis=1).data
            full = ad.max_pool_over_time(seq, axis=1).data
        assert np.all(full >= short)

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="variant"):
            build_mil_model("mil3", "conv", "blstm")

    def test_mil2_forces_linear_head(self):
        assert tiny("mil2", cls="mlp2").spec.cls == "linear"

    def test_gradients_flow(self, rng):
        model = tiny("mil2", feat="conv")
        loss = cross_entropy(mil_forward("mil2", model, model.prepare(rng.uniform(-1, 1, 9000))), [1])
        ad.backward(loss)
        assert all(np.any(p.grad != 0) for p in model.named_parameters().values())


class TestBags:
    @pytest.mark.parametrize("label, idx", [("CHN", 0), ("CXN", 0), ("FAN", 1), ("MAN", 2), (2, 2)])
    def test_labels(self, label, idx):
        assert bag_label(label) == idx

    def test_unknown_label(self):
        with pytest.raises(ValueError):
            bag_label("DOG")

    def test_duration_filter_is_inclusive(self):
        audio = np.zeros(20 * SAMPLE_RATE)
        segs = [
            SegmentRef(audio, "FAN", 0.0, 1.28),
            SegmentRef(audio, "FAN", 0.0, 10.24),
            SegmentRef(audio, "MAN", 0.0, 1.27),
            SegmentRef(audio, "MAN", 0.0, 10.25),
        ]
        bags, dropped = filter_bags(segs)
        assert dropped == 2
        assert [len(b.samples) for b in bags] == [20480, 163840]

    def test_short_bag_rejected(self):
        with pytest.raises(ValueError):
            Bag(np.zeros(100), 0)

    def test_manifest(self, tmp_path, rng):
        write_wav(tmp_path / "a.wav", rng.uniform(-1, 1, 3 * SAMPLE_RATE))
        (tmp_path / "bags.csv").write_text("wav_path,class,start_s,end_s\na.wav,MAN,0.5,2.5\na.wav,FAN,0,0.5\n")
        bags = load_bags(tmp_path / "bags.csv")
        assert len(bags) == 1 and bags[0].label == 2

    def test_manifest_missing_column(self, tmp_path):
        (tmp_path / "bags.csv").write_text("wav,class\n")
        with pytest.raises(ValueError, match="missing"):
            load_bags(tmp_path / "bags.csv")


class TestPretrain:
    @pytest.fixture(scope="class")
    @classmethod
    def toy_bags(cls):
        rng = np.random.default_rng(5)
        t = np.arange(int(1.5 * SAMPLE_RATE)) / SAMPLE_RATE
        bags = []
        for label, f in enumerate([3000.0, 1000.0, 300.0]):
            for _ in range(3):
                bags.append(Bag(np.sin(2 * np.pi * f * t + rng.uniform(0, 6)) * rng.uniform(0.3, 1), label))
        return bags

    @pytest.mark.parametrize("variant", ["mil1", "mil2"])
    def test_archive_components(self, toy_bags, variant):
        res = mil_pretrain(variant, "logmel", "blstm", toy_bags, toy_bags, epochs=1, profile="tiny")
        prefixes = {k.split(".")[0] for k in res.archive}
        assert prefixes == ({"embed", "cls"} if variant == "mil2" else {"embed"})
        assert len(res.losses) == 1 and 0 <= res.val_accuracy <= 1

    def test_loss_falls(self, toy_bags):
        res = mil_pretrain("mil2", "logmel", "blstm", toy_bags, epochs=4, lr=0.01, decay=0.9, profile="tiny")
        assert res.losses[-1] < res.losses[0]

    def test_no_bags(self):
        with pytest.raises(ValueError):
            mil_pretrain("mil1", "conv", "blstm", [])

    def test_archive_loads_into_diarization_model(self, toy_bags, tmp_path):
        res = mil_pretrain("mil1", "conv", "blstm", toy_bags[:2], epochs=1, profile="tiny")
        arc.save_archive(res.archive, tmp_path / "m.arc")
        config = table1_config(5)
        model = DiarizationModel(ModelSpec("conv", "blstm", config.cls, 3, "tiny"))
        loaded = arc.load_into(model.named_parameters(), arc.load_archive(tmp_path / "m.arc"), ["feat", "embed"])
        assert loaded and all(n.startswith(("feat.", "embed.")) for n in loaded)

    def test_accuracy_of_empty_set_is_nan(self):
        assert np.isnan(bag_accuracy("mil1", tiny("mil1"), []))
