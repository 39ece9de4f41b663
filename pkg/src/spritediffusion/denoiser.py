"""Conditional noise-prediction U-Net with timestep + prompt conditioning.

Conditioning is FiLM-style: the prompt vector is projected and added to the
timestep embedding, and every residual block derives a per-channel scale and
shift from that shared embedding. Skip connections concatenate encoder
features at matching resolution; the output head is zero-initialized so a
fresh model predicts exactly zero noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import Conv2d, GroupNorm, Linear, Mlp2, Module
from .tensor import ShapeError, Tensor
from .text import PromptEncoder, Vocabulary


@dataclass(frozen=True)
class DenoiserConfig:
    image_size: int = 32
    channels: int = 3
    base_width: int = 32
    levels: int = 2
    cond_dim: int = 64
    time_embed_dim: int = 128

    def __post_init__(self):
        if self.image_size % (1 << self.levels):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^levels")

    def level_widths(self) -> list[int]:
        return [self.base_width * (1 << i) for i in range(self.levels)]

    def mid_width(self) -> int:
        return self.base_width * (1 << self.levels)


def timestep_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features; distinct integer timesteps map to distinct rows."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    feats = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((t.size, 1))], axis=1)
    return feats.astype(T.get_default_dtype())


class TimestepEmbedding(Module):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.dim = dim
        self.mlp = Mlp2(dim, dim, dim, rng)

    def __call__(self, t: np.ndarray) -> Tensor:
        return self.mlp(Tensor(timestep_features(t, self.dim)))


class ResBlock(Module):
    """GroupNorm/SiLU/conv twice, with a FiLM scale+shift from the embedding."""

    def __init__(self, cin: int, cout: int, emb_dim: int, rng: np.random.Generator):
        self.cin = cin
        self.cout = cout
        self.norm1 = GroupNorm(cin)
        self.conv1 = Conv2d(cin, cout, 3, rng, pad=1)
        self.emb_proj = Linear(emb_dim, 2 * cout, rng)
        self.norm2 = GroupNorm(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, pad=1)
        self.skip = Conv2d(cin, cout, 1, rng) if cin != cout else None

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(T.silu(self.norm1(x)))
        se = self.emb_proj(T.silu(emb))
        scl = T.reshape(T.narrow(se, 1, 0, self.cout), (-1, self.cout, 1, 1))
        sft = T.reshape(T.narrow(se, 1, self.cout, self.cout), (-1, self.cout, 1, 1))
        h = T.mul(self.norm2(h), scl + 1.0) + sft
        h = self.conv2(T.silu(h))
        base = x if self.skip is None else self.skip(x)
        return h + base


class Downsample(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, channels, 3, rng, stride=2, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.conv = Conv2d(channels, channels, 3, rng, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        return self.conv(T.upsample_nearest2(x))


class UNet(Module):
    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.config = config
        ed = config.time_embed_dim
        widths = config.level_widths()
        mid = config.mid_width()

        self.time_embed = TimestepEmbedding(ed, rng)
        self.cond_proj = Linear(config.cond_dim, ed, rng)

        self.stem = Conv2d(config.channels, widths[0], 3, rng, pad=1)
        enc, downs = [], []
        cin = widths[0]
        for w in widths:
            enc.append(ResBlock(cin, w, ed, rng))
            downs.append(Downsample(w, rng))
            cin = w
        self.enc = enc
        self.downs = downs
        self.mid1 = ResBlock(cin, mid, ed, rng)
        self.mid2 = ResBlock(mid, mid, ed, rng)

        dec, ups = [], []
        cin = mid
        for w in reversed(widths):
            ups.append(Upsample(cin, rng))
            dec.append(ResBlock(cin + w, w, ed, rng))
            cin = w
        self.ups = ups
        self.dec = dec
        self.head_norm = GroupNorm(widths[0])
        self.head = Conv2d(widths[0], config.channels, 3, rng, pad=1, zero_init=True)

    def embedding(self, t: np.ndarray, cond: Tensor) -> Tensor:
        return self.time_embed(t) + self.cond_proj(cond)

    def __call__(self, x: Tensor, t: np.ndarray, cond: Tensor, control=None) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.channels or x.shape[2] != cfg.image_size or x.shape[3] != cfg.image_size:
            raise ShapeError(f"denoiser expects (B,{cfg.channels},{cfg.image_size},{cfg.image_size}), got {x.shape}")
        t = np.asarray(t).reshape(-1)
        if t.shape[0] != x.shape[0] or cond.shape != (x.shape[0], cfg.cond_dim):
            raise ShapeError("batch sizes of x, t and cond must agree")
        emb = self.embedding(t, cond)

        h = self.stem(x)
        skips = []
        for block, down in zip(self.enc, self.downs):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid2(self.mid1(h, emb), emb)

        if control is not None:
            branch_skips, branch_mid = control
            skips = [s + z for s, z in zip(skips, branch_skips)]
            h = h + branch_mid

        for up, block, skip in zip(self.ups, self.dec, reversed(skips)):
            h = up(h)
            h = block(T.concat([h, skip], axis=1), emb)
        return self.head(T.silu(self.head_norm(h)))


class GenerativeModel(Module):
    """The trainable unit: denoiser U-Net plus its prompt encoder.

    Checkpoints serialize both, so merged models carry consistent text
    conditioning."""

    def __init__(self, config: DenoiserConfig, vocab: Vocabulary, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        self.config = config
        self.unet = UNet(config, rng)
        self.text = PromptEncoder(vocab, config.cond_dim, rng)

    @property
    def vocab(self) -> Vocabulary:
        return self.text.vocab


def predict_noise(
    model: GenerativeModel,
    x_t: Tensor,
    t: np.ndarray,
    cond: Tensor,
    t_max: Optional[int] = None,
    control=None,
) -> Tensor:
    """Run the conditional denoiser; output shape equals input shape."""
    t = np.asarray(t).reshape(-1)
    if np.any(t < 0) or (t_max is not None and np.any(t >= t_max)):
        raise ValueError(f"timestep out of range [0, {t_max})")
    return model.unet(x_t, t, cond, control=control)
