"""Transformer-encoder building blocks on top of the tensor engine.

Pre-norm blocks with GELU feedforward (stable at very small widths without
warmup), sinusoidal positional encoding, and an embedding made of two
feed-forward layers.  The causal variant masks attention logits to -inf
before the row max, so past outputs and gradients are bit-exactly
independent of future inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import AutodiffError, ConfigError
from .tensor import Tensor, softmax


@dataclass(frozen=True)
class EncoderConfig:
    """Encoder hyperparameters."""

    n_layers: int = 1
    n_heads: int = 1
    d_model: int = 8
    d_ff: int = 16
    causal: bool = True
    max_len: int = 2048

    def __post_init__(self):
        if min(self.n_layers, self.n_heads, self.d_model, self.d_ff) < 1:
            raise ConfigError("all encoder dimensions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    def as_dict(self) -> dict:
        return {"n_layers": self.n_layers, "n_heads": self.n_heads,
                "d_model": self.d_model, "d_ff": self.d_ff,
                "causal": self.causal, "max_len": self.max_len}


#: Table of "small"/"large" encoder sizes used across the toolkit.
ENCODER_PRESETS = {
    "small": dict(n_layers=1, n_heads=1, d_model=8, d_ff=16),
    "large": dict(n_layers=4, n_heads=4, d_model=96, d_ff=192),
}


class Module:
    """Minimal parameter container with recursive discovery."""

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                out[name] = value
            elif isinstance(value, Module):
                for sub, p in value.named_params().items():
                    out[f"{name}.{sub}"] = p
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        for sub, p in item.named_params().items():
                            out[f"{name}.{i}.{sub}"] = p
        return out

    def params(self) -> list[Tensor]:
        return list(self.named_params().values())

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        named = self.named_params()
        missing = set(named) - set(state)
        extra = set(state) - set(named)
        if missing or extra:
            raise ConfigError(f"state mismatch: missing={sorted(missing)} "
                              f"extra={sorted(extra)}")
        for name, param in named.items():
            arr = np.asarray(state[name], dtype=param.data.dtype)
            if arr.shape != param.data.shape:
                raise AutodiffError(
                    f"shape mismatch for {name}: expected {param.data.shape}, "
                    f"got {arr.shape}")
            param.data = arr


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32):
        bound = 1.0 / np.sqrt(d_in)
        self.W = Tensor(rng.uniform(-bound, bound, (d_in, d_out)),
                        requires_grad=True, dtype=dtype)
        self.b = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.W + self.b


class LayerNorm(Module):
    def __init__(self, d: int, dtype=np.float32, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(d), requires_grad=True, dtype=dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        inv = (var + self.eps) ** -0.5
        return centered * inv * self.gamma + self.beta


_MASK_CACHE: dict[tuple, np.ndarray] = {}


def causal_mask(n: int, dtype) -> np.ndarray:
    """(n, n) additive mask: 0 on/below the diagonal, -inf above."""
    key = (n, np.dtype(dtype).str)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = np.triu(np.full((n, n), -np.inf, dtype=dtype), k=1)
        _MASK_CACHE[key] = mask
    return mask


class MultiHeadAttention(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.cfg = cfg
        self.d_head = cfg.d_model // cfg.n_heads
        self.w_qkv = Linear(cfg.d_model, 3 * cfg.d_model, rng, dtype)
        self.w_out = Linear(cfg.d_model, cfg.d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h, dh = self.cfg.n_heads, self.d_head
        qkv = self.w_qkv(x)  # (b, t, 3d)
        q = qkv[:, :, 0 * d:1 * d].reshape(b, t, h, dh).swapaxes(1, 2)
        k = qkv[:, :, 1 * d:2 * d].reshape(b, t, h, dh).swapaxes(1, 2)
        v = qkv[:, :, 2 * d:3 * d].reshape(b, t, h, dh).swapaxes(1, 2)
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
        if self.cfg.causal:
            scores = scores + causal_mask(t, x.dtype)
        attn = softmax(scores, axis=-1)
        ctx = (attn @ v).swapaxes(1, 2).reshape(b, t, d)
        return self.w_out(ctx)


class FeedForward(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.lin1 = Linear(cfg.d_model, cfg.d_ff, rng, dtype)
        self.lin2 = Linear(cfg.d_ff, cfg.d_model, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.lin1(x).gelu())


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.norm1 = LayerNorm(cfg.d_model, dtype)
        self.attn = MultiHeadAttention(cfg, rng, dtype)
        self.norm2 = LayerNorm(cfg.d_model, dtype)
        self.ff = FeedForward(cfg, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


def sinusoidal_encoding(max_len: int, d_model: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    idx = np.arange(d_model)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * np.floor(idx / 2.0) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


class Encoder(Module):
    """Embedding (two feed-forward layers) + positional encoding +
    pre-norm transformer stack with a final LayerNorm.

    Input (T, d_in) or (B, T, d_in); output the same leading shape with
    d_model channels.
    """

    def __init__(self, d_in: int, cfg: EncoderConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.d_in = d_in
        self.embed1 = Linear(d_in, cfg.d_model, rng, dtype)
        self.embed2 = Linear(cfg.d_model, cfg.d_model, rng, dtype)
        self.layers = [EncoderLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.norm_out = LayerNorm(cfg.d_model, dtype)
        self._posenc = sinusoidal_encoding(cfg.max_len, cfg.d_model, dtype)
        self._scale = float(np.sqrt(cfg.d_model))

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.data.ndim == 2
        if squeeze:
            x = x.reshape(1, *x.shape)
        b, t, d_in = x.shape
        if d_in != self.d_in:
            raise AutodiffError(
                f"shape mismatch: encoder expects d_in={self.d_in}, got {d_in}")
        if t > self.cfg.max_len:
            raise AutodiffError(
                f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        h = self.embed2(self.embed1(x).gelu())
        h = h * self._scale + self._posenc[:t]
        for layer in self.layers:
            h = layer(h)
        h = self.norm_out(h)
        return h.reshape(t, self.cfg.d_model) if squeeze else h


def encoder_param_count(d_in: int, cfg: EncoderConfig, d_out: int) -> int:
    """Closed-form trainable-weight count for Encoder + a Linear head,
    matching the implemented layer inventory exactly."""
    d, ff = cfg.d_model, cfg.d_ff
    embed = (d_in * d + d) + (d * d + d)
    per_layer = (
        2 * (2 * d)                  # two LayerNorms
        + (d * 3 * d + 3 * d)        # qkv projection
        + (d * d + d)                # attention output projection
        + (d * ff + ff) + (ff * d + d)  # feedforward
    )
    final_norm = 2 * d
    head = d * d_out + d_out
    return embed + cfg.n_layers * per_layer + final_norm + head
