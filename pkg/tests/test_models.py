import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cribdiar import autodiff as ad
from cribdiar.features import FRAME_SAMPLES, LOGMEL_DIM, logmel
from cribdiar.models import (
    CLS_KINDS,
    DESK,
    EMBED_KINDS,
    FEAT_KINDS,
    FULL,
    TINY,
    DiarizationModel,
    ModelSpec,
    Widths,
)

COMBOS = list(itertools.product(FEAT_KINDS, EMBED_KINDS, CLS_KINDS))


def tiny_model(feat="conv", embed="blstm", cls="linear", n_classes=3, seed=0):
    return DiarizationModel(ModelSpec(feat, embed, cls, n_classes, "tiny", seed, "float64"))


class TestProfiles:
    def test_full_widths(self):
        assert FULL.conv_channels == tuple(24 * i for i in range(1, 13))
        assert FULL.conv_dim == 288 and FULL.conv_kernel == 15
        assert FULL.blstm_layers == 5 and FULL.blstm_hidden == 256

    def test_desk_widths(self):
        assert DESK.conv_channels == (12, 24, 36, 48, 60, 72)
        assert DESK.conv_halvings == (2,) * 6
        assert DESK.blstm_layers == 2 and DESK.blstm_hidden == 64

    @pytest.mark.parametrize("profile", [FULL, DESK, TINY])
    def test_every_profile_halves_time_twelve_times(self, profile):
        assert sum(profile.conv_halvings) == 12

    def test_bad_halvings_rejected(self):
        with pytest.raises(ValueError, match="12"):
            Widths(conv_channels=(4, 8), conv_halvings=(5, 5))

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError, match="feat"):
            ModelSpec(feat="mfcc")

    def test_full_model_builds_and_runs(self, rng):
        model = DiarizationModel(ModelSpec("conv", "blstm", "linear", 3, "full"))
        with ad.no_grad():
            out = model(rng.uniform(-1, 1, 2 * FRAME_SAMPLES))
        assert out.shape == (1, 3, 2)
        assert model.feat.out_dim == 288
        assert model.named_parameters()["feat.block12.weight"].shape == (288, 264, 15)


class TestFrameCounts:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(400, 40000))
    def test_conv_matches_logmel(self, n):
        model = tiny_model()
        x = np.zeros((1, n))
        with ad.no_grad():
            conv_frames = model.features(model.prepare(x)).shape[1]
        assert conv_frames == logmel(np.zeros(n)).shape[1] == -(-n // FRAME_SAMPLES)

    @pytest.mark.parametrize("feat", FEAT_KINDS)
    def test_output_shape(self, rng, feat):
        model = tiny_model(feat, n_classes=4)
        with ad.no_grad():
            out = model(rng.uniform(-1, 1, (2, 5 * FRAME_SAMPLES)))
        assert out.shape == (2, 4, 5)
        assert np.all((out.data > 0) & (out.data < 1))

    def test_logmel_input_dimension(self, rng):
        model = tiny_model("logmel")
        assert model.prepare(rng.uniform(-1, 1, (1, 8192))).shape == (1, 2, LOGMEL_DIM)


class TestGraph:
    @pytest.mark.parametrize("feat, embed, cls", COMBOS)
    def test_gradient_reaches_every_parameter(self, rng, feat, embed, cls):
        model = tiny_model(feat, embed, cls)
        out = model(rng.uniform(-1, 1, (2, 3 * FRAME_SAMPLES)))
        ad.backward(ad.mean(out))
        for name, p in model.named_parameters().items():
            assert p.grad is not None, name
            assert np.any(p.grad != 0), name

    def test_parameter_prefixes(self):
        names = tiny_model().named_parameters()
        assert {n.split(".")[0] for n in names} == {"feat", "embed", "cls"}
        assert set(tiny_model("logmel").component_parameters("feat")) == set()

    def test_same_seed_same_weights(self):
        a, b = tiny_model(seed=3).named_parameters(), tiny_model(seed=3).named_parameters()
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

    def test_mha_is_frame_permutation_equivariant(self, rng):
        model = tiny_model("logmel", "mha")
        x = rng.standard_normal((1, 6, LOGMEL_DIM))
        perm = rng.permutation(6)
        with ad.no_grad():
            a = model.logits(x).data
            b = model.logits(x[:, perm]).data
        np.testing.assert_allclose(a[:, perm], b, atol=1e-10)

    def test_blstm_sees_both_directions(self, rng):
        # changing the last frame must move the first frame's output
        model = tiny_model("logmel", "blstm")
        x = rng.standard_normal((1, 5, LOGMEL_DIM))
        y = x.copy()
        y[0, -1] += 1.0
        with ad.no_grad():
            a, b = model.logits(x).data, model.logits(y).data
        assert not np.allclose(a[0, 0], b[0, 0])
