"""Central finite-difference checks for every op and every assembled graph."""

from __future__ import annotations

import itertools
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import CLS_KINDS, EMBED_KINDS, FEAT_KINDS, DiarizationModel, ModelSpec
from .training import focal_loss

TOLERANCE = 1e-4
OP_EPS = 1e-5
# Whole-network losses sit near 0.1 while some parameter gradients are ~1e-8, so
# at h = 1e-5 one ulp of the loss already costs ~1e-4 relative error.  A larger
# step with kink-aware shrinking keeps roundoff and truncation both small.
GRAPH_EPS = 1e-4
KINK_RETRIES = 2
# With branches frozen there is no kink to avoid, so the step can grow until
# truncation, not roundoff, bounds the error.
FROZEN_EPS = 1e-3


def _weighted(y: Tensor, w: np.ndarray) -> Tensor:
    # a random weighting keeps shift-invariant ops (softmax, layer_norm) from having zero gradient
    return ad.sum(y * w)


def op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """name -> (scalar function of one float64 tensor, evaluation point)."""
    x = rng.standard_normal((2, 3, 5))
    pos = np.abs(rng.standard_normal((2, 3, 5))) + 0.5
    other = rng.standard_normal((2, 3, 5))
    row = rng.standard_normal((5,))
    mat = rng.standard_normal((5, 4))
    w_out = {s: rng.standard_normal(s) for s in [(2, 3, 5), (2, 3, 4), (2, 5), (2, 3), (2, 3, 3), (2, 6, 5), (2, 3, 2)]}
    conv_x = rng.standard_normal((2, 3, 9))
    conv_w = rng.standard_normal((4, 3, 4))
    conv_b = rng.standard_normal((4,))
    w_conv = rng.standard_normal((2, 4, 9))

    def W(shape):
        return w_out[shape]

    cases = {
        "add": (lambda t: _weighted(t + other, W((2, 3, 5))), x),
        "add_broadcast": (lambda t: _weighted(Tensor(x) + t, W((2, 3, 5))), row),
        "sub": (lambda t: _weighted(other - t, W((2, 3, 5))), x),
        "mul": (lambda t: _weighted(t * other, W((2, 3, 5))), x),
        "mul_broadcast": (lambda t: _weighted(Tensor(x) * t, W((2, 3, 5))), row),
        "matmul_left": (lambda t: _weighted(t @ Tensor(mat), W((2, 3, 4))), x),
        "matmul_right": (lambda t: _weighted(Tensor(x) @ t, W((2, 3, 4))), mat),
        "conv1d_input": (lambda t: _weighted(ad.conv1d(t, Tensor(conv_w), Tensor(conv_b)), w_conv), conv_x),
        "conv1d_weight": (lambda t: _weighted(ad.conv1d(Tensor(conv_x), t, Tensor(conv_b)), w_conv), conv_w),
        "conv1d_bias": (lambda t: _weighted(ad.conv1d(Tensor(conv_x), Tensor(conv_w), t), w_conv), conv_b),
        "sigmoid": (lambda t: _weighted(ad.sigmoid(t), W((2, 3, 5))), x),
        "tanh": (lambda t: _weighted(ad.tanh(t), W((2, 3, 5))), x),
        "relu": (lambda t: _weighted(ad.relu(t), W((2, 3, 5))), x),
        "leaky_relu": (lambda t: _weighted(ad.leaky_relu(t, 0.01), W((2, 3, 5))), x),
        "softmax": (lambda t: _weighted(ad.softmax(t, axis=-1), W((2, 3, 5))), x),
        "softmax_axis1": (lambda t: _weighted(ad.softmax(t, axis=1), W((2, 3, 5))), x),
        "log": (lambda t: _weighted(ad.log(t), W((2, 3, 5))), pos),
        "exp": (lambda t: _weighted(ad.exp(t), W((2, 3, 5))), x),
        "power": (lambda t: _weighted(ad.power(t, 2.5), W((2, 3, 5))), pos),
        "max_pool_over_time": (lambda t: _weighted(ad.max_pool_over_time(t, axis=-1), W((2, 3))), x),
        "decimate_by_2_over_time": (lambda t: _weighted(ad.decimate_by_2_over_time(t, axis=-1), W((2, 3, 3))), x),
        "layer_norm": (lambda t: _weighted(ad.layer_norm(t, axis=-1), W((2, 3, 5))), x),
        "concat": (lambda t: _weighted(ad.concat([t, Tensor(other)], axis=1), W((2, 6, 5))), x),
        "narrow": (lambda t: _weighted(ad.narrow(t, 2, 1, 2), W((2, 3, 2))), x),
        "sum": (lambda t: _weighted(ad.sum(t, axis=1), W((2, 5))), x),
        "mean": (lambda t: _weighted(ad.mean(t, axis=2), W((2, 3))), x),
    }
    w_t = rng.standard_normal((2, 5, 3))
    cases["transpose"] = (lambda t: _weighted(ad.transpose(t, (0, 2, 1)), w_t), x)
    return cases


def run_op_suite(seeds=range(10), eps: float = OP_EPS) -> dict[str, float]:
    """Max relative error per op over several random evaluation points."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, (f, x0) in op_cases(np.random.default_rng(seed)).items():
            worst[name] = max(worst.get(name, 0.0), ad.check_gradients(f, x0, eps))
    return worst


def _step(eps: float | None, freeze_branches: bool) -> float:
    if eps is not None:
        return eps
    return FROZEN_EPS if freeze_branches else GRAPH_EPS


def _model_loss(model: DiarizationModel, inputs: np.ndarray, labels: np.ndarray) -> Callable[[], Tensor]:
    return lambda: focal_loss(model.forward_prepared(inputs), labels)


def model_graph_errors(
    feat: str,
    embed: str,
    cls: str,
    profile: str = "tiny",
    n_frames: int = 3,
    per_tensor: int | None = None,
    seed: int = 0,
    eps: float | None = None,
    kink_retries: int = KINK_RETRIES,
    freeze_branches: bool = False,
) -> dict[str, float]:
    """Per-parameter max relative error of the focal-loss diarization graph."""
    from .features import FRAME_SAMPLES

    rng = np.random.default_rng(seed)
    model = DiarizationModel(ModelSpec(feat, embed, cls, 3, profile, seed, "float64"))
    waves = rng.uniform(-1, 1, size=(2, n_frames * FRAME_SAMPLES))
    inputs = model.prepare(waves)
    labels = (rng.random((2, 3, n_frames)) < 0.4).astype(np.float64)
    return ad.check_param_gradients(
        _model_loss(model, inputs, labels), model.named_parameters(), _step(eps, freeze_branches), per_tensor, rng,
        kink_retries, freeze_branches,
    )


def mil_graph_errors(
    variant: str,
    feat: str = "conv",
    embed: str = "blstm",
    profile: str = "tiny",
    n_frames: int = 3,
    per_tensor: int | None = None,
    seed: int = 0,
    eps: float | None = None,
    kink_retries: int = KINK_RETRIES,
    freeze_branches: bool = False,
) -> dict[str, float]:
    from .features import FRAME_SAMPLES
    from .mil import build_mil_model, cross_entropy, mil_forward

    rng = np.random.default_rng(seed)
    model = build_mil_model(variant, feat, embed, "linear", profile, seed, "float64")
    inputs = model.prepare(rng.uniform(-1, 1, size=(1, n_frames * FRAME_SAMPLES)))
    label = [int(rng.integers(3))]
    return ad.check_param_gradients(
        lambda: cross_entropy(mil_forward(variant, model, inputs), label), model.named_parameters(),
        _step(eps, freeze_branches), per_tensor, rng, kink_retries, freeze_branches,
    )


def run_graph_suite(
    profile: str = "tiny",
    per_tensor: int | None = None,
    seed: int = 0,
    n_frames: int = 3,
    freeze_branches: bool = False,
) -> dict[str, float]:
    """Worst error over parameters for all feat x embed x cls graphs and both MIL graphs."""
    out = {}
    kw = dict(n_frames=n_frames, per_tensor=per_tensor, seed=seed, freeze_branches=freeze_branches)
    for feat, embed, cls in itertools.product(FEAT_KINDS, EMBED_KINDS, CLS_KINDS):
        errs = model_graph_errors(feat, embed, cls, profile, **kw)
        out[f"{feat}+{embed}+{cls}"] = max(errs.values())
    for variant in ("mil1", "mil2"):
        errs = mil_graph_errors(variant, "conv", "blstm", profile, **kw)
        out[variant] = max(errs.values())
    return out
