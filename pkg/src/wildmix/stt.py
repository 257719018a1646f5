"""Spectro-Temporal Transformer for separating a mixture spectrogram into ``s`` sources.

Pipeline for a batch of ``(B, W, H)`` mixtures::

    embed -> N_E x STE -> N_D x decoder -> masked generation -> (B, W, H, s)

Each STE runs a temporal path over frames (``W x H_e``) and a spectral path
over the transposed input (``H_e x W``) and sums them. Ablation variants are
selected with :attr:`SttConfig.ablation`.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.nn import Conv1d, FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .autodiff.tensor import Tensor, as_tensor
from .dsp import Spectrogram
from .errors import ConfigError, ShapeError

ABLATIONS = ("full", "tp-only", "sp-only", "tp-double", "sp-double", "no-CNN", "no-MGN")
ABLATION_VARIANTS = ("tp-only", "sp-only", "tp-double", "sp-double", "no-CNN", "no-MGN")

# Hyperparameter grids searched for the transformer models.
GRID = {
    "n_layers": (2, 4, 6, 8),
    "heads": (1, 2, 4),
    "dropout": (0.0, 0.2, 0.5),
    "lr": (0.001, 0.0005, 0.0001),
}


@dataclass(frozen=True)
class SttConfig:
    """Architecture hyperparameters.

    ``cnn_spec`` lists ``(kernel, channels)`` per conv layer of each path;
    ``channels == 0`` means "the path width", and the last layer must map
    back to the path width so the CNN preserves shape. ``mask_bias`` is
    added to the mask layer's initial bias.
    """

    H: int = 258
    W: int = 460
    H_e: int = 256
    N_E: int = 2
    N_D: int = 2
    heads: int = 2
    cnn_spec: tuple = ((3, 0), (3, 0))
    dropout: float = 0.0
    s: int = 2
    ablation: str = "full"
    ff_mult: int = 2
    mask_bias: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cnn_spec", tuple(tuple(int(v) for v in c) for c in self.cnn_spec))
        self.validate()

    def validate(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if min(self.H, self.W, self.H_e, self.s, self.heads, self.ff_mult) < 1:
            raise ConfigError("H, W, H_e, s, heads and ff_mult must be positive")
        if self.H % 2:
            raise ConfigError(f"H must be even (real||imag halves), got {self.H}")
        if self.N_E < 1 or self.N_D < 1:
            raise ConfigError("N_E and N_D must be >= 1")
        if self.H_e % self.heads:
            raise ConfigError(f"H_e={self.H_e} not divisible by heads={self.heads}")
        if self.uses_spectral and self.W % self.heads:
            raise ConfigError(f"spectral attention width W={self.W} not divisible by heads={self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.cnn_spec:
            if any(k < 1 or c < 0 for k, c in self.cnn_spec):
                raise ConfigError(f"bad cnn_spec {self.cnn_spec}")
            if self.cnn_spec[-1][1] != 0:
                raise ConfigError("last conv layer must use channels=0 (the path width)")

    @property
    def uses_spectral(self) -> bool:
        return self.ablation not in ("tp-only", "tp-double")

    def path_kinds(self) -> tuple:
        """Path types summed inside each STE, in order."""
        return {
            "tp-only": ("tp",),
            "sp-only": ("sp",),
            "tp-double": ("tp", "tp"),
            "sp-double": ("sp", "sp"),
        }.get(self.ablation, ("tp", "sp"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cnn_spec"] = [list(c) for c in self.cnn_spec]
        return d

    @classmethod
    def from_dict(cls, d) -> "SttConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def replace(self, **changes) -> "SttConfig":
        d = self.to_dict()
        d.update(changes)
        return SttConfig.from_dict(d)


def sinusoidal_table(n_positions: int, dim: int) -> np.ndarray:
    """Standard sin/cos positional table, ``(n_positions, dim)``."""
    pos = np.arange(n_positions)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def spectral_encoding(height: int) -> np.ndarray:
    """One value per spectral row: the first channel of the table indexed by bin."""
    return sinusoidal_table(height, 1)[:, 0]


class STEPath(Module):
    """conv stack -> MSA -> Add&Norm -> feedforward -> Add&Norm, over rows of ``x``."""

    def __init__(self, width, cfg: SttConfig, rng, use_cnn=True):
        self.convs = []
        if use_cnn:
            c_in = width
            for kernel, channels in cfg.cnn_spec:
                c_out = channels or width
                self.convs.append(Conv1d(kernel, c_in, c_out, rng))
                c_in = c_out
        self.msa = MultiHeadAttention(width, cfg.heads, rng)
        self.norm1 = LayerNorm(width)
        self.ff = FeedForward(width, cfg.ff_mult * width, rng)
        self.norm2 = LayerNorm(width)
        self.width = width
        self.dropout = cfg.dropout

    def __call__(self, x, train=False, rng=None):
        if x.shape[-1] != self.width:
            raise ShapeError(f"path of width {self.width} got input {x.shape}")
        h = x
        for n, conv in enumerate(self.convs):
            h = conv(h)
            if n < len(self.convs) - 1:
                h = ops.relu(h)
        a = ops.dropout(self.msa(h), self.dropout, train, rng)
        h = self.norm1(h + a)
        f = ops.dropout(self.ff(h), self.dropout, train, rng)
        return self.norm2(f + h)


class STE(Module):
    def __init__(self, cfg: SttConfig, rng):
        use_cnn = cfg.ablation != "no-CNN"
        self.kinds = cfg.path_kinds()
        self.paths = [
            STEPath(cfg.H_e if kind == "tp" else cfg.W, cfg, rng, use_cnn) for kind in self.kinds
        ]

    def __call__(self, x, train=False, rng=None):
        out = None
        for kind, path in zip(self.kinds, self.paths):
            y = path(x, train, rng) if kind == "tp" else ops.transpose(path(ops.transpose(x), train, rng))
            out = y if out is None else out + y
        return out


class DecoderBlock(Module):
    """Non-autoregressive decoder: self-attn, cross-attn to the encoder, feedforward."""

    def __init__(self, cfg: SttConfig, rng):
        d = cfg.H_e
        self.self_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm1 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, cfg.heads, rng)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, cfg.ff_mult * d, rng)
        self.norm3 = LayerNorm(d)
        self.dropout = cfg.dropout

    def __call__(self, x, memory, train=False, rng=None, return_weights=False):
        a = ops.dropout(self.self_attn(x), self.dropout, train, rng)
        h = self.norm1(x + a)
        c, weights = self.cross_attn(h, memory, return_weights=True)
        h = self.norm2(h + ops.dropout(c, self.dropout, train, rng))
        f = ops.dropout(self.ff(h), self.dropout, train, rng)
        out = self.norm3(h + f)
        return (out, weights) if return_weights else out


class MaskedGeneration(Module):
    """``FF1(x) * relu(FF2(FF1(x)))``, or ``FF1(x)`` alone without the mask."""

    def __init__(self, cfg: SttConfig, rng):
        self.H, self.s = cfg.H, cfg.s
        self.ff1 = Linear(cfg.H_e, cfg.H * cfg.s, rng)
        self.ff2 = None
        if cfg.ablation != "no-MGN":
            self.ff2 = Linear(cfg.H * cfg.s, cfg.H * cfg.s, rng)
            # start with the mask open; a mask that closes early never reopens
            self.ff2.bias.data += cfg.mask_bias

    def __call__(self, x, return_mask=False):
        y = self.ff1(x)
        mask = None
        if self.ff2 is not None:
            mask = ops.relu(self.ff2(y))
            y = y * mask
        out = ops.reshape(y, (*x.shape[:-1], self.H, self.s))
        return (out, mask) if return_mask else out


class SttModel(Module):
    def __init__(self, cfg: SttConfig):
        cfg.validate()
        self.config = cfg
        rng = np.random.default_rng(cfg.seed)
        self.embedding = Linear(cfg.H, cfg.H_e, rng)
        self.encoders = [STE(cfg, rng) for _ in range(cfg.N_E)]
        self.decoders = [DecoderBlock(cfg, rng) for _ in range(cfg.N_D)]
        self.mgn = MaskedGeneration(cfg, rng)
        self.spectral_pe = spectral_encoding(cfg.H)
        self.temporal_pe = sinusoidal_table(cfg.W, cfg.H_e)
        self.rng = np.random.default_rng([cfg.seed, 1])

    # -- stages --------------------------------------------------------
    def embed(self, x) -> Tensor:
        x = as_tensor(x, self.embedding.weight.dtype)
        if x.shape[-2:] != (self.config.W, self.config.H):
            raise ShapeError(f"expected (..., {self.config.W}, {self.config.H}) input, got {x.shape}")
        dtype = self.embedding.weight.dtype
        h = self.embedding(x + self.spectral_pe.astype(dtype))
        return h + self.temporal_pe.astype(dtype)

    def encode(self, h, train=False) -> Tensor:
        for ste in self.encoders:
            h = ste(h, train, self.rng)
        return h

    def decode(self, memory, train=False, return_weights=False):
        h, weights = memory, []
        for block in self.decoders:
            h, w = block(h, memory, train, self.rng, return_weights=True)
            weights.append(w)
        return (h, weights) if return_weights else h

    def forward(self, x, train=False) -> Tensor:
        """``(B, W, H)`` or ``(W, H)`` mixtures -> ``(..., W, H, s)`` predictions."""
        h = ops.dropout(self.embed(x), self.config.dropout, train, self.rng)
        return self.mgn(self.decode(self.encode(h, train), train))

    __call__ = forward

    # -- parameter census ----------------------------------------------
    def census(self) -> dict:
        """Parameter counts grouped by component."""
        counts = {"embedding": self.embedding.num_parameters(), "tp": 0, "sp": 0, "cnn": 0,
                  "decoder": 0, "ff1": self.mgn.ff1.num_parameters(), "ff2": 0}
        for ste in self.encoders:
            for kind, path in zip(ste.kinds, ste.paths):
                counts[kind] += path.num_parameters()
                counts["cnn"] += sum(c.num_parameters() for c in path.convs)
        counts["decoder"] = sum(d.num_parameters() for d in self.decoders)
        if self.mgn.ff2 is not None:
            counts["ff2"] = self.mgn.ff2.num_parameters()
        counts["total"] = self.num_parameters()
        return counts

    def load_state(self, state: dict) -> None:
        named = dict(self.named_parameters())
        if set(named) != set(state):
            missing = sorted(set(named) ^ set(state))[:5]
            raise ShapeError(f"parameter names differ from model: {missing}")
        for name, p in named.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def stt_forward(mixture: Spectrogram, model: SttModel, train=False) -> list:
    """Separate one mixture spectrogram into ``s`` spectrograms."""
    out = model.forward(mixture.data, train).data
    return [mixture.with_data(out[..., k].astype(np.float64)) for k in range(model.config.s)]


def mixture_projection(mixture: Spectrogram, s: int) -> list:
    """Worst-case reference: every predicted source is the mixture itself."""
    return [mixture.with_data(mixture.data.copy()) for _ in range(s)]


def desk_config(**overrides) -> SttConfig:
    """Small configuration matching the desk STFT profile (8 kHz, 1 s, n_fft 128, hop 96)."""
    base = dict(H=130, W=84, H_e=64, N_E=2, N_D=2, heads=2, s=2)
    base.update(overrides)
    return SttConfig(**base)
