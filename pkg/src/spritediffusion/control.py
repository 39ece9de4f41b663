"""Spatially conditioned generation: edge-map annotator and the zero-conv branch.

The branch is a trainable copy of the denoiser's encoder half. A three-conv
stem lifts the single-channel condition map into feature space at the input
resolution; branch outputs re-enter the frozen base network through 1x1
zero-initialized convolutions at every skip connection and at the mid block,
so an untrained branch leaves the base model bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .denoiser import DenoiserConfig, GenerativeModel, ResBlock, Downsample
from .nn import Conv2d, Module
from .tensor import Tensor

EDGE_THRESHOLD = 0.2

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class ControlInput:
    """Single-channel spatial condition in [0,1], same size as the target."""

    kind: str
    image: np.ndarray

    def __post_init__(self):
        if self.kind != "edge_map":
            raise ValueError(f"unsupported control kind {self.kind!r}")
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise ValueError(f"control image must be (1, H, W), got {self.image.shape}")


def _correlate2d_edge(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += kernel[dy, dx] * padded[dy : dy + img.shape[0], dx : dx + img.shape[1]]
    return out


def edge_annotator(image: np.ndarray, threshold: float = EDGE_THRESHOLD) -> ControlInput:
    """Thresholded Sobel magnitude of the luma channel; deterministic, binary output."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    gx = _correlate2d_edge(img, _SOBEL_X)
    gy = _correlate2d_edge(img, _SOBEL_Y)
    mag = np.sqrt(gx * gx + gy * gy)
    peak = mag.max()
    if peak > 0:
        mag = mag / peak
    edge = (mag >= threshold).astype(T.get_default_dtype())
    return ControlInput(kind="edge_map", image=edge[None, :, :])


class ControlBranch(Module):
    """Trainable encoder copy plus condition stem and zero-init injection convs."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.config = config
        ed = config.time_embed_dim
        widths = config.level_widths()
        mid = config.mid_width()

        w0 = widths[0]
        self.cond_stem = [
            Conv2d(1, max(w0 // 2, 4), 3, rng, pad=1),
            Conv2d(max(w0 // 2, 4), max(w0 // 2, 4), 3, rng, pad=1),
            Conv2d(max(w0 // 2, 4), w0, 3, rng, pad=1),
        ]
        self.stem = Conv2d(config.channels, w0, 3, rng, pad=1)
        enc, downs = [], []
        cin = w0
        for w in widths:
            enc.append(ResBlock(cin, w, ed, rng))
            downs.append(Downsample(w, rng))
            cin = w
        self.enc = enc
        self.downs = downs
        self.mid1 = ResBlock(cin, mid, ed, rng)
        self.mid2 = ResBlock(mid, mid, ed, rng)
        self.zero_convs = [Conv2d(w, w, 1, rng, zero_init=True) for w in widths]
        self.zero_mid = Conv2d(mid, mid, 1, rng, zero_init=True)

    def features(self, x: Tensor, emb: Tensor, y: Tensor):
        """(per-skip additive features, mid additive feature) for the base U-Net."""
        if y.shape[-2:] != x.shape[-2:] or y.shape[1] != 1:
            raise ValueError(f"condition shape {y.shape} does not match input {x.shape}")
        hint = y
        for i, conv in enumerate(self.cond_stem):
            hint = conv(hint)
            if i + 1 < len(self.cond_stem):
                hint = T.silu(hint)
        h = self.stem(x) + hint
        adds = []
        for block, down, zc in zip(self.enc, self.downs, self.zero_convs):
            h = block(h, emb)
            adds.append(zc(h))
            h = down(h)
        h = self.mid2(self.mid1(h, emb), emb)
        return adds, self.zero_mid(h)


_ENCODER_PARTS = ("stem", "enc", "downs", "mid1", "mid2")


def control_attach(model: GenerativeModel, seed: int = 0) -> ControlBranch:
    """Clone the denoiser encoder into a fresh branch; zero convs guarantee the
    conditioned forward equals the base forward bit-exactly at creation."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    branch = ControlBranch(model.config, rng)
    base_state = model.unet.state_dict()
    branch_state = branch.state_dict()
    for name in branch_state:
        root = name.split(".", 1)[0]
        if root in _ENCODER_PARTS:
            if name not in base_state:
                raise KeyError(f"architecture mismatch: base has no tensor {name!r}")
            branch_state[name] = base_state[name]
    branch.load_state_dict(branch_state)
    return branch


def control_diffusion_loss(
    model: GenerativeModel,
    branch: ControlBranch,
    images: np.ndarray,
    conditions: np.ndarray,
    prompts,
    schedule,
    rng: np.random.Generator,
    prompt_dropout: float = 0.0,
) -> Tensor:
    """Epsilon-MSE with branch features injected; base weights stay frozen by
    the caller so only the branch trains."""
    from .schedule import q_sample
    from .training import NumericalAbort, _apply_prompt_dropout

    n = images.shape[0]
    dt = T.get_default_dtype()
    t = rng.integers(0, schedule.timesteps, size=n)
    eps = rng.standard_normal(images.shape).astype(dt)
    drop = (rng.random(n) < prompt_dropout) if prompt_dropout > 0 else np.zeros(n, dtype=bool)

    cond = model.text.encode_batch(list(prompts))
    cond = _apply_prompt_dropout(cond, model.text.null_cond, drop)
    x_t = q_sample(Tensor(images.astype(dt)), t, Tensor(eps), schedule)
    emb = model.unet.embedding(t, cond)
    feats = branch.features(x_t, emb, Tensor(conditions.astype(dt)))
    eps_hat = model.unet(x_t, t, cond, control=feats)
    loss = T.mse(eps_hat, Tensor(eps))
    if not np.isfinite(loss.data):
        raise NumericalAbort(f"non-finite control loss: {loss.data!r}")
    return loss
