"""Learnable components: conv feature extractor, BLSTM / self-attention embedders,
frame classifiers and the assembled diarization model.

Internal layout is frames-major: features and embeddings are (batch, L, dim).
The model output is (batch, C, L) so it lines up with label matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import LOGMEL_DIM, logmel

FEAT_KINDS = ("conv", "logmel")
EMBED_KINDS = ("blstm", "mha")
CLS_KINDS = ("linear", "mlp2")


@dataclass(frozen=True)
class Widths:
    """Layer sizes.  ``conv_halvings[i]`` is how many times block i halves time."""

    conv_channels: tuple[int, ...] = tuple(24 * i for i in range(1, 13))
    conv_halvings: tuple[int, ...] = (1,) * 12
    conv_kernel: int = 15
    embed_dim: int = 256
    blstm_hidden: int = 256
    blstm_layers: int = 5
    mha_heads: int = 4
    mha_ff: int = 1024
    mha_layers: int = 2

    def __post_init__(self):
        if len(self.conv_channels) != len(self.conv_halvings):
            raise ValueError("conv_channels and conv_halvings must have equal length")
        if sum(self.conv_halvings) != 12:
            raise ValueError("conv blocks must halve time 12 times in total (4096 samples per frame)")
        if self.embed_dim % self.mha_heads:
            raise ValueError("embed_dim must be divisible by mha_heads")

    @property
    def conv_dim(self) -> int:
        return self.conv_channels[-1]


FULL = Widths()
# Desk scale: 6 blocks of 12*i channels, each block decimating twice.
DESK = Widths(
    conv_channels=tuple(12 * i for i in range(1, 7)),
    conv_halvings=(2,) * 6,
    embed_dim=64,
    blstm_hidden=64,
    blstm_layers=2,
    mha_heads=4,
    mha_ff=256,
    mha_layers=2,
)
# Only for finite-difference checks of whole graphs.
TINY = Widths(
    conv_channels=(3, 4, 5, 6),
    conv_halvings=(3, 3, 3, 3),
    conv_kernel=5,
    embed_dim=8,
    blstm_hidden=4,
    blstm_layers=2,
    mha_heads=2,
    mha_ff=12,
    mha_layers=2,
)
PROFILES = {"full": FULL, "desk": DESK, "tiny": TINY}


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype, slope: float = 0.01) -> np.ndarray:
    # variance-preserving through a leaky ReLU, so deep conv stacks do not fade out
    bound = math.sqrt(6.0 / ((1.0 + slope * slope) * fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Named parameter container with dotted names (``block1.weight``)."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.ascontiguousarray(value), requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self._children.items():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype=np.float32, bias: bool = True):
        super().__init__()
        self.weight = self.add_param("weight", _uniform(rng, (n_in, n_out), n_in, dtype))
        self.bias = self.add_param("bias", _uniform(rng, (n_out,), n_in, dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param("gain", np.ones(dim, dtype=dtype))
        self.shift = self.add_param("shift", np.zeros(dim, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, axis=-1, eps=self.eps) * self.gain + self.shift


class ConvExtractor(Module):
    """Learned filterbank on raw samples: blocks of conv1d -> LeakyReLU -> decimation."""

    def __init__(self, widths: Widths, rng, dtype=np.float32):
        super().__init__()
        self.widths = widths
        k = widths.conv_kernel
        self.blocks = []
        n_in = 1
        for i, n_out in enumerate(widths.conv_channels, start=1):
            block = Module()
            w = block.add_param("weight", _he_uniform(rng, (n_out, n_in, k), n_in * k, dtype))
            b = block.add_param("bias", np.zeros(n_out, dtype=dtype))
            self.add_child(f"block{i}", block)
            self.blocks.append((w, b))
            n_in = n_out

    @property
    def out_dim(self) -> int:
        return self.widths.conv_dim

    def __call__(self, waves: Tensor) -> Tensor:
        """(batch, T) samples -> (batch, ceil(T/4096), H)."""
        x = waves if waves.ndim == 3 else Tensor(waves.data[:, None, :])
        for (w, b), halvings in zip(self.blocks, self.widths.conv_halvings):
            x = ad.conv1d(x, w, b)
            for _ in range(halvings):
                x = ad.decimate_by_2_over_time(x, axis=-1)
            # elementwise, so identical to activating before decimation
            x = ad.leaky_relu(x, 0.01)
        return ad.transpose(x, (0, 2, 1))


class LSTMDirection(Module):
    """One direction of one LSTM layer.  Gate order: input, forget, output, cell."""

    def __init__(self, n_in: int, hidden: int, rng, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        self.w_ih = self.add_param("w_ih", _uniform(rng, (n_in, 4 * hidden), n_in, dtype))
        self.w_hh = self.add_param("w_hh", _uniform(rng, (hidden, 4 * hidden), hidden, dtype))
        b = _uniform(rng, (4 * hidden,), hidden, dtype)
        b[hidden : 2 * hidden] += 1.0
        self.bias = self.add_param("bias", b)

    def __call__(self, x: Tensor, reverse: bool = False) -> Tensor:
        """(batch, L, n_in) -> hidden states (batch, L, hidden)."""
        h_dim = self.hidden
        proj = x @ self.w_ih + self.bias
        n_steps = x.shape[1]
        outputs: list[Tensor | None] = [None] * n_steps
        h = c = None
        for t in range(n_steps - 1, -1, -1) if reverse else range(n_steps):
            gates = ad.narrow(proj, 1, t, 1)
            if h is not None:
                gates = gates + h @ self.w_hh
            ifo = ad.sigmoid(ad.narrow(gates, 2, 0, 3 * h_dim))
            cand = ad.tanh(ad.narrow(gates, 2, 3 * h_dim, h_dim))
            i_g = ad.narrow(ifo, 2, 0, h_dim)
            o_g = ad.narrow(ifo, 2, 2 * h_dim, h_dim)
            c = i_g * cand if c is None else ad.narrow(ifo, 2, h_dim, h_dim) * c + i_g * cand
            h = o_g * ad.tanh(c)
            outputs[t] = h
        return ad.concat(outputs, axis=1)


class BlstmEmbedder(Module):
    def __init__(self, n_in: int, widths: Widths, rng, dtype=np.float32):
        super().__init__()
        hid = widths.blstm_hidden
        self.layers = []
        for i in range(1, widths.blstm_layers + 1):
            layer = Module()
            fwd = layer.add_child("fwd", LSTMDirection(n_in, hid, rng, dtype))
            bwd = layer.add_child("bwd", LSTMDirection(n_in, hid, rng, dtype))
            self.add_child(f"layer{i}", layer)
            self.layers.append((fwd, bwd))
            n_in = 2 * hid
        self.proj = self.add_child("proj", Linear(2 * hid, widths.embed_dim, rng, dtype))

    def directions(self, x: Tensor) -> list[tuple[Tensor, Tensor]]:
        """Per-layer (forward, backward) hidden state sequences."""
        states = []
        for fwd, bwd in self.layers:
            hf, hb = fwd(x), bwd(x, reverse=True)
            states.append((hf, hb))
            x = ad.concat([hf, hb], axis=2)
        return states

    def __call__(self, x: Tensor) -> Tensor:
        hf, hb = self.directions(x)[-1]
        return self.proj(ad.concat([hf, hb], axis=2))


class EncoderLayer(Module):
    """Pre-norm transformer block: LN -> self-attention (+res) -> LN -> FFN (+res)."""

    def __init__(self, dim: int, heads: int, ff: int, rng, dtype=np.float32):
        super().__init__()
        self.heads = heads
        self.norm1 = self.add_child("norm1", LayerNorm(dim, dtype))
        self.query = self.add_child("query", Linear(dim, dim, rng, dtype))
        # a key bias only shifts every score in a row equally, so softmax ignores it
        self.key = self.add_child("key", Linear(dim, dim, rng, dtype, bias=False))
        self.value = self.add_child("value", Linear(dim, dim, rng, dtype))
        self.out = self.add_child("out", Linear(dim, dim, rng, dtype))
        self.norm2 = self.add_child("norm2", LayerNorm(dim, dtype))
        self.ff1 = self.add_child("ff1", Linear(dim, ff, rng, dtype))
        self.ff2 = self.add_child("ff2", Linear(ff, dim, rng, dtype))

    def attention(self, x: Tensor) -> Tensor:
        dim = x.shape[-1]
        dk = dim // self.heads
        q, k, v = self.query(x), self.key(x), self.value(x)
        scale = 1.0 / math.sqrt(dk)
        heads = []
        for j in range(self.heads):
            qj = ad.narrow(q, 2, j * dk, dk)
            kj = ad.narrow(k, 2, j * dk, dk)
            vj = ad.narrow(v, 2, j * dk, dk)
            scores = (qj @ ad.transpose(kj, (0, 2, 1))) * scale
            heads.append(ad.softmax(scores, axis=-1) @ vj)
        return self.out(ad.concat(heads, axis=2))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attention(self.norm1(x))
        return x + self.ff2(ad.relu(self.ff1(self.norm2(x))))


class MhaEmbedder(Module):
    """Linear input map, stacked self-attention encoder layers, final layer norm.

    No positional encoding, so the embedder is permutation-equivariant over frames.
    """

    def __init__(self, n_in: int, widths: Widths, rng, dtype=np.float32):
        super().__init__()
        dim = widths.embed_dim
        self.inp = self.add_child("input", Linear(n_in, dim, rng, dtype))
        self.layers = [
            self.add_child(f"layer{i}", EncoderLayer(dim, widths.mha_heads, widths.mha_ff, rng, dtype))
            for i in range(1, widths.mha_layers + 1)
        ]
        self.norm = self.add_child("norm", LayerNorm(dim, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        x = self.inp(x)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)


class Classifier(Module):
    """Frame-local map from embeddings to logits: linear, or two layers with ReLU."""

    def __init__(self, kind: str, dim: int, n_classes: int, rng, dtype=np.float32):
        super().__init__()
        if kind not in CLS_KINDS:
            raise ValueError(f"unknown classifier kind {kind!r}")
        self.kind = kind
        if kind == "linear":
            self.layers = [self.add_child("out", Linear(dim, n_classes, rng, dtype))]
        else:
            self.layers = [
                self.add_child("hidden", Linear(dim, dim, rng, dtype)),
                self.add_child("out", Linear(dim, n_classes, rng, dtype)),
            ]

    def __call__(self, e: Tensor) -> Tensor:
        if self.kind == "linear":
            return self.layers[0](e)
        return self.layers[1](ad.relu(self.layers[0](e)))


@dataclass
class ModelSpec:
    feat: str = "conv"
    embed: str = "blstm"
    cls: str = "linear"
    n_classes: int = 3
    profile: str = "desk"
    seed: int = 0
    dtype: str = "float32"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.feat not in FEAT_KINDS:
            raise ValueError(f"feat must be one of {FEAT_KINDS}, got {self.feat!r}")
        if self.embed not in EMBED_KINDS:
            raise ValueError(f"embed must be one of {EMBED_KINDS}, got {self.embed!r}")
        if self.cls not in CLS_KINDS:
            raise ValueError(f"cls must be one of {CLS_KINDS}, got {self.cls!r}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {sorted(PROFILES)}, got {self.profile!r}")


class DiarizationModel(Module):
    """sigmoid(classify(embed(features(waveform)))) with parameter prefixes feat/embed/cls."""

    def __init__(self, spec: ModelSpec, widths: Widths | None = None):
        super().__init__()
        self.spec = spec
        self.widths = widths or PROFILES[spec.profile]
        dtype = np.dtype(spec.dtype)
        rng = np.random.default_rng(spec.seed)
        if spec.feat == "conv":
            self.feat = self.add_child("feat", ConvExtractor(self.widths, rng, dtype))
            feat_dim = self.feat.out_dim
        else:
            self.feat = None
            feat_dim = LOGMEL_DIM
        embed_cls = BlstmEmbedder if spec.embed == "blstm" else MhaEmbedder
        self.embed = self.add_child("embed", embed_cls(feat_dim, self.widths, rng, dtype))
        self.cls = self.add_child("cls", Classifier(spec.cls, self.widths.embed_dim, spec.n_classes, rng, dtype))
        self.dtype = dtype

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def prepare(self, waves: np.ndarray) -> np.ndarray:
        """Model input for a (batch, T) array of samples: raw samples or log-Mel frames."""
        waves = np.atleast_2d(np.asarray(waves))
        if self.feat is not None:
            return waves.astype(self.dtype)
        return np.stack([logmel(w).T for w in waves]).astype(self.dtype)

    def features(self, inputs) -> Tensor:
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        return self.feat(x) if self.feat is not None else x

    def logits(self, inputs) -> Tensor:
        """(batch, L, C) logits from prepared inputs."""
        return self.cls(self.embed(self.features(inputs)))

    def forward_prepared(self, inputs) -> Tensor:
        return ad.transpose(ad.sigmoid(self.logits(inputs)), (0, 2, 1))

    def __call__(self, waves: np.ndarray) -> Tensor:
        """Frame probabilities (batch, C, ceil(T/4096)) for raw samples."""
        return self.forward_prepared(self.prepare(waves))

    def component_parameters(self, component: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if k.startswith(component + ".")}
