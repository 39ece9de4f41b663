"""Training losses (plain and prior-preserving), AdamW, and the train loop."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .denoiser import GenerativeModel, predict_noise
from .schedule import NoiseSchedule, q_sample
from .tensor import Tensor


class NumericalAbort(FloatingPointError):
    """Raised when a training loss stops being finite; the run must not continue."""


@dataclass
class TrainConfig:
    base_lr: float = 1.0e-4
    lora_unet_lr: float = 1.0e-4
    lora_text_lr: float = 5.0e-6
    prior_weight: float = 1.0
    prompt_dropout: float = 0.1
    batch_size: int = 16
    steps: int = 3000
    seed: int = 0
    weight_decay: float = 0.01
    lora_rank: int = 4
    lora_alpha: float = 4.0
    train_mode: str = "lora"  # dreambooth fine-tunes: "lora" (default) or "full"

    def __post_init__(self):
        if self.base_lr <= 0 or self.lora_unet_lr <= 0 or self.lora_text_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not (0.0 <= self.prompt_dropout < 1.0):
            raise ValueError("prompt_dropout must be in [0, 1)")


def to_model_space(images01: np.ndarray) -> np.ndarray:
    """Corpus images live in [0,1]; the diffusion process runs on [-1,1]."""
    return (images01.astype(T.get_default_dtype()) * 2.0 - 1.0).astype(T.get_default_dtype())


def to_image_space(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) * 0.5, 0.0, 1.0)


def _apply_prompt_dropout(cond: Tensor, null_cond: Tensor, mask: np.ndarray) -> Tensor:
    if not mask.any():
        return cond
    dt = T.get_default_dtype()
    keep = Tensor((1.0 - mask).astype(dt).reshape(-1, 1))
    drop = Tensor(mask.astype(dt).reshape(-1, 1))
    null_row = T.reshape(null_cond, (1, null_cond.shape[0]))
    return T.mul(cond, keep) + T.mul(null_row, drop)


def diffusion_loss(
    model: GenerativeModel,
    images: np.ndarray,
    prompts: Sequence[str],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    prompt_dropout: float = 0.0,
) -> Tensor:
    """Epsilon-MSE objective. Draw order from rng is pinned: timesteps, noise,
    then the dropout mask — reproducibility tests depend on it."""
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    dt = T.get_default_dtype()
    t = rng.integers(0, schedule.timesteps, size=n)
    eps = rng.standard_normal(images.shape).astype(dt)
    if prompt_dropout > 0.0:
        drop = rng.random(n) < prompt_dropout
    else:
        drop = np.zeros(n, dtype=bool)

    cond = model.text.encode_batch(list(prompts))
    cond = _apply_prompt_dropout(cond, model.text.null_cond, drop)
    x_t = q_sample(Tensor(images.astype(dt)), t, Tensor(eps), schedule)
    eps_hat = predict_noise(model, x_t, t, cond, t_max=schedule.timesteps)
    loss = T.mse(eps_hat, Tensor(eps))
    if not np.isfinite(loss.data):
        raise NumericalAbort(f"non-finite diffusion loss: {loss.data!r}")
    return loss


@dataclass
class PriorPreservationLoss:
    total: Tensor
    subject: Tensor
    prior: Tensor


def prior_preservation_loss(
    model: GenerativeModel,
    subject: tuple[np.ndarray, Sequence[str]],
    regularization: tuple[np.ndarray, Sequence[str]],
    weight: float,
    schedule: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    rng_subject: Optional[np.random.Generator] = None,
    rng_reg: Optional[np.random.Generator] = None,
    prompt_dropout: float = 0.0,
) -> PriorPreservationLoss:
    """Subject loss plus weight * class-prior loss, each on its own pinned
    RNG stream (spawned from `rng` unless given explicitly)."""
    if rng_subject is None or rng_reg is None:
        if rng is None:
            raise ValueError("provide rng or both per-term streams")
        rng_subject, rng_reg = rng.spawn(2)
    l_subj = diffusion_loss(model, subject[0], subject[1], schedule, rng_subject, prompt_dropout)
    l_reg = diffusion_loss(model, regularization[0], regularization[1], schedule, rng_reg, prompt_dropout)
    total = l_subj + T.scale(l_reg, weight)
    return PriorPreservationLoss(total=total, subject=l_subj, prior=l_reg)


# ---------------------------------------------------------------------------
# optimizer


def adamw_init(params: dict[str, Tensor]) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adamw_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
) -> None:
    """One decoupled-weight-decay Adam update, in place."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        if weight_decay:
            p.data -= (lr * weight_decay) * p.data
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


class AdamW:
    """Param groups with independent learning rates over one shared step count."""

    def __init__(self, groups: Sequence[tuple[dict[str, Tensor], float]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.groups = [(params, lr, adamw_init(params)) for params, lr in groups]
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay

    def zero_grad(self) -> None:
        for params, _, _ in self.groups:
            for p in params.values():
                p.grad = None

    def step(self) -> None:
        for params, lr, state in self.groups:
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            adamw_step(params, grads, state, lr, self.beta1, self.beta2, self.eps, self.weight_decay)


# ---------------------------------------------------------------------------
# the loop


@dataclass
class LossCurve:
    rows: list[tuple[int, float, float, float]] = field(default_factory=list)

    def append(self, step: int, loss: float, subject: float, prior: float) -> None:
        self.rows.append((step, loss, subject, prior))

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "loss_subject", "loss_prior"])
            for row in self.rows:
                w.writerow([row[0], f"{row[1]:.8f}", f"{row[2]:.8f}", f"{row[3]:.8f}"])


def _sample_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.integers(0, n, size=batch_size)


def train(
    model: GenerativeModel,
    schedule: NoiseSchedule,
    images: np.ndarray,
    prompts: Sequence[str],
    config: TrainConfig,
    mode: str = "base",
    reg_images: Optional[np.ndarray] = None,
    reg_prompts: Optional[Sequence[str]] = None,
    adapters=None,
    log_every: int = 0,
) -> LossCurve:
    """Run the optimization loop in place on `model` (and `adapters` if given).

    images are model-space arrays (B,C,H,W in [-1,1]); captions are raw
    strings. In dreambooth mode every step draws a subject batch and a
    regularization batch and optimizes the prior-preserving sum.
    """
    if images.shape[0] == 0:
        raise ValueError("empty training corpus")
    if mode not in ("base", "dreambooth"):
        raise ValueError(f"unknown training mode {mode!r}")
    if mode == "dreambooth" and (reg_images is None or reg_prompts is None):
        raise ValueError("dreambooth mode requires a regularization corpus")

    ss = np.random.SeedSequence(config.seed)
    rng_data, rng_loss = [np.random.default_rng(s) for s in ss.spawn(2)]

    if mode == "base":
        groups = [(dict(model.named_parameters()), config.base_lr)]
        model.set_trainable(True)
    else:
        if config.train_mode == "full":
            model.set_trainable(True)
            groups = [(dict(model.named_parameters()), config.base_lr)]
        else:
            model.set_trainable(False)
            groups = []
        if adapters is not None:
            unet_params, text_params = adapters.trainable_groups()
            if unet_params:
                groups.append((unet_params, config.lora_unet_lr))
            if text_params:
                groups.append((text_params, config.lora_text_lr))
        if not groups:
            raise ValueError("nothing to train: dreambooth LoRA mode needs attached adapters")
    opt = AdamW(groups, weight_decay=config.weight_decay)

    curve = LossCurve()
    n = images.shape[0]
    for step in range(config.steps):
        opt.zero_grad()
        idx = _sample_batch(rng_data, n, config.batch_size)
        batch_imgs = images[idx]
        batch_prompts = [prompts[i] for i in idx]
        if mode == "base":
            loss = diffusion_loss(model, batch_imgs, batch_prompts, schedule, rng_loss, config.prompt_dropout)
            total, subj, prior = loss, loss.item(), 0.0
        else:
            ridx = _sample_batch(rng_data, reg_images.shape[0], config.batch_size)
            pp = prior_preservation_loss(
                model,
                (batch_imgs, batch_prompts),
                (reg_images[ridx], [reg_prompts[i] for i in ridx]),
                config.prior_weight,
                schedule,
                rng=rng_loss,
                prompt_dropout=config.prompt_dropout,
            )
            total, subj, prior = pp.total, pp.subject.item(), pp.prior.item()
        total.backward()
        curve.append(step, total.item(), subj, prior)
        opt.step()
        if log_every and step % log_every == 0:
            recent = [r[1] for r in curve.rows[-log_every:]]
            print(f"step {step:6d}  loss {np.mean(recent):.5f}", flush=True)
    return curve
