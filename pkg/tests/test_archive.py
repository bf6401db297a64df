import numpy as np
import pytest

from cribdiar import archive as arc
from cribdiar.autodiff import Tensor
from cribdiar.models import DiarizationModel, ModelSpec


@pytest.fixture
def params(rng):
    return {
        "feat.block1.weight": Tensor(rng.standard_normal((3, 1, 5)).astype(np.float32)),
        "embed.proj.bias": Tensor(rng.standard_normal(4).astype(np.float32)),
        "cls.out.weight": Tensor(rng.standard_normal((4, 3)).astype(np.float32)),
    }


class TestRoundTrip:
    def test_values_and_meta(self, tmp_path, params):
        arc.save_archive(params, tmp_path / "a.arc", {"kind": "test"})
        back, meta = arc.read_archive(tmp_path / "a.arc")
        assert meta == {"kind": "test"}
        for k, v in params.items():
            np.testing.assert_array_equal(back[k], v.data)

    def test_save_load_save_is_byte_identical(self, tmp_path, params):
        arc.save_archive(params, tmp_path / "a.arc")
        arc.save_archive(arc.load_archive(tmp_path / "a.arc"), tmp_path / "b.arc")
        assert (tmp_path / "a.arc").read_bytes() == (tmp_path / "b.arc").read_bytes()

    def test_model_round_trip(self, tmp_path):
        a = DiarizationModel(ModelSpec(profile="tiny", seed=1))
        b = DiarizationModel(ModelSpec(profile="tiny", seed=2))
        arc.save_archive(a.named_parameters(), tmp_path / "m.arc")
        arc.load_into(b.named_parameters(), arc.load_archive(tmp_path / "m.arc"), arc.COMPONENTS)
        for k, v in a.named_parameters().items():
            np.testing.assert_array_equal(b.named_parameters()[k].data, v.data)


class TestErrors:
    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.arc").write_bytes(b"NOTANARC" + b"\0" * 16)
        with pytest.raises(arc.CorruptArchiveError, match="magic"):
            arc.load_archive(tmp_path / "x.arc")

    def test_truncated_buffer(self, tmp_path, params):
        arc.save_archive(params, tmp_path / "a.arc")
        raw = (tmp_path / "a.arc").read_bytes()
        (tmp_path / "t.arc").write_bytes(raw[:-8])
        with pytest.raises(arc.CorruptArchiveError, match="outside"):
            arc.load_archive(tmp_path / "t.arc")

    def test_garbled_manifest(self, tmp_path):
        (tmp_path / "g.arc").write_bytes(arc.MAGIC + (5).to_bytes(8, "little") + b"{{{{{")
        with pytest.raises(arc.CorruptArchiveError, match="manifest"):
            arc.load_archive(tmp_path / "g.arc")

    def test_missing_parameter(self):
        model = DiarizationModel(ModelSpec(profile="tiny"))
        with pytest.raises(arc.MissingParameterError, match="embed"):
            arc.load_into(model.named_parameters(), {}, ["embed"])

    def test_shape_mismatch_names_the_tensor(self):
        model = DiarizationModel(ModelSpec(profile="tiny"))
        archive = {k: v.data for k, v in model.named_parameters().items()}
        archive["cls.out.weight"] = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(arc.ShapeMismatchError, match="cls.out.weight"):
            arc.load_into(model.named_parameters(), archive, ["cls"])

    def test_unknown_component(self):
        with pytest.raises(ValueError):
            arc.load_into({}, {}, ["head"])

    def test_logmel_model_skips_feat(self):
        src = DiarizationModel(ModelSpec("logmel", "blstm", profile="tiny", seed=1))
        mel = DiarizationModel(ModelSpec("logmel", "blstm", profile="tiny"))
        archive = {k: v.data for k, v in src.named_parameters().items()}
        loaded = arc.load_into(mel.named_parameters(), archive, ["feat", "embed"])
        assert loaded and not any(n.startswith("feat.") for n in loaded)
