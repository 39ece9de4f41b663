"""Inference-time integrators: DDIM, Euler, Euler-ancestral, DPM++ 2M.

One epsilon-prediction model serves all four. DDIM walks the discrete
timestep ladder directly; the other three run in sigma space, where
x_sigma = x_t / sqrt(alpha_bar) and the model input is recovered as
x_sigma / sqrt(1 + sigma^2). The denoised estimate in sigma space is
x_sigma - sigma * eps_hat.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .denoiser import GenerativeModel, predict_noise
from .schedule import NoiseSchedule
from .tensor import Tensor
from .training import to_image_space

SAMPLER_KINDS = ("ddim", "euler", "euler_a", "dpmpp_2m")


class UnknownSamplerError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "ddim"
    steps: int = 50
    eta: float = 0.0
    guidance: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise UnknownSamplerError(f"unknown sampler {self.kind!r}; choose from {SAMPLER_KINDS}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must be in [0, 1]")
        if self.guidance < 0.0:
            raise ValueError("guidance scale must be >= 0")


def timestep_ladder(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Descending timestep indices, evenly spaced, from T-1 down to 0."""
    t_total = schedule.timesteps
    if not (1 <= steps <= t_total):
        raise ValueError(f"steps must be in [1, {t_total}]")
    if steps == 1:
        return np.array([t_total - 1], dtype=np.int64)
    idx = np.round(np.linspace(t_total - 1, 0, steps)).astype(np.int64)
    if np.any(np.diff(idx) >= 0):
        raise ValueError(
            f"{steps} steps collide after rounding on a {t_total}-step schedule; "
            f"use steps <= {(t_total + 1) // 2} or steps == {t_total}"
        )
    return idx


def sigma_ladder(schedule: NoiseSchedule, steps: int) -> tuple[np.ndarray, np.ndarray]:
    """(sigmas, t_indices): sigmas has steps+1 entries, strictly decreasing,
    starting at the schedule's max sigma and ending at exactly 0."""
    idx = timestep_ladder(schedule, steps)
    sigmas = np.concatenate([schedule.sigma[idx], [0.0]])
    return sigmas, idx


# ---------------------------------------------------------------------------
# single-step update rules (pure numpy; drivers below batch them)


def ddim_step(
    x_t: np.ndarray,
    eps_hat: np.ndarray,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One DDIM update from timestep t to t_prev (t_prev == -1 means alpha_bar = 1,
    i.e. the final state is exactly the x0 estimate)."""
    if t_prev >= t:
        raise ValueError(f"t_prev {t_prev} must be < t {t}")
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bar[t_prev])
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    radicand = 1.0 - ab_prev - sigma * sigma
    if radicand < -1e-12:
        raise ValueError(f"negative DDIM radicand {radicand}; schedule misuse (t={t}, t_prev={t_prev}, eta={eta})")
    x_prev = math.sqrt(ab_prev) * x0_hat + math.sqrt(max(radicand, 0.0)) * eps_hat
    if sigma > 0.0:
        if noise is None:
            raise ValueError("eta > 0 requires a noise tensor")
        x_prev = x_prev + sigma * noise
    return x_prev


def ddpm_posterior_sigma(t: int, t_prev: int, schedule: NoiseSchedule) -> float:
    """Ancestral posterior std between adjacent timesteps (the eta=1 DDIM sigma)."""
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = 1.0 if t_prev < 0 else float(schedule.alpha_bar[t_prev])
    return math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)


def euler_step(x: np.ndarray, sigma: float, sigma_next: float, denoised: np.ndarray) -> np.ndarray:
    if sigma <= 0.0:
        raise ValueError("euler_step requires sigma > 0")
    d = (x - denoised) / sigma
    return x + (sigma_next - sigma) * d


def ancestral_sigmas(sigma: float, sigma_next: float) -> tuple[float, float]:
    """(sigma_down, sigma_up) with sigma_up^2 + sigma_down^2 == sigma_next^2."""
    if not (sigma > sigma_next >= 0.0):
        raise ValueError(f"need sigma > sigma_next >= 0, got ({sigma}, {sigma_next})")
    up_sq = sigma_next**2 * (sigma**2 - sigma_next**2) / sigma**2
    sigma_up = math.sqrt(up_sq)
    sigma_down = math.sqrt(sigma_next**2 - up_sq)
    return sigma_down, sigma_up


def euler_ancestral_step(
    x: np.ndarray,
    sigma: float,
    sigma_next: float,
    denoised: np.ndarray,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    sigma_down, sigma_up = ancestral_sigmas(sigma, sigma_next)
    x = euler_step(x, sigma, sigma_down, denoised)
    if sigma_up > 0.0:
        if noise is None:
            raise ValueError("non-terminal ancestral step requires a noise tensor")
        x = x + sigma_up * noise
    return x


def dpmpp_2m_step(
    x: np.ndarray,
    sigma: float,
    sigma_next: float,
    denoised: np.ndarray,
    denoised_prev: Optional[np.ndarray] = None,
    h_prev: Optional[float] = None,
) -> tuple[np.ndarray, float]:
    """One DPM++ 2M update in log-sigma time; returns (x_next, h) so the caller
    can carry the multistep state. Terminal steps (sigma_next == 0) return the
    denoised estimate directly."""
    if sigma <= 0.0 or sigma_next < 0.0 or sigma_next >= sigma:
        raise ValueError(f"need sigma > sigma_next >= 0, got ({sigma}, {sigma_next})")
    if denoised_prev is not None and h_prev is None:
        raise ValueError("multistep weighting requested without h_prev")
    if sigma_next == 0.0:
        return denoised.copy(), math.inf
    t, t_next = -math.log(sigma), -math.log(sigma_next)
    h = t_next - t
    if denoised_prev is None:
        d = denoised
    else:
        r = h_prev / h
        d = (1.0 + 1.0 / (2.0 * r)) * denoised - (1.0 / (2.0 * r)) * denoised_prev
    x_next = (sigma_next / sigma) * x - (math.exp(-h) - 1.0) * d
    return x_next, h


# ---------------------------------------------------------------------------
# guided prediction and the sampling driver


def guided_eps(
    model: GenerativeModel,
    x: np.ndarray,
    t: int,
    cond: Tensor,
    guidance: float,
    t_max: Optional[int] = None,
    control=None,
) -> np.ndarray:
    """Classifier-free guided noise prediction:
    eps = eps_uncond + g * (eps_cond - eps_uncond)."""
    if guidance < 0.0:
        raise ValueError("guidance must be >= 0")
    if t < 0 or (t_max is not None and t >= t_max):
        raise ValueError(f"timestep {t} out of range [0, {t_max})")
    n = x.shape[0]
    dt = T.get_default_dtype()
    t_arr = np.full(n, t, dtype=np.int64)
    with T.no_grad():
        null = np.broadcast_to(model.text.null_cond.data, (n, cond.shape[1])).astype(dt)
        if guidance == 0.0:
            return model.unet(Tensor(x), t_arr, Tensor(null), control=_control_feats(model, x, t_arr, Tensor(null), control)).data
        if guidance == 1.0:
            return model.unet(Tensor(x), t_arr, cond, control=_control_feats(model, x, t_arr, cond, control)).data
        x2 = np.concatenate([x, x], axis=0)
        t2 = np.concatenate([t_arr, t_arr])
        cond2 = Tensor(np.concatenate([cond.data, null], axis=0))
        feats = _control_feats(model, x2, t2, cond2, control, repeat=2)
        eps2 = model.unet(Tensor(x2), t2, cond2, control=feats).data
        eps_c, eps_u = eps2[:n], eps2[n:]
        return eps_u + guidance * (eps_c - eps_u)


def _control_feats(model, x, t_arr, cond, control, repeat: int = 1):
    if control is None:
        return None
    branch, y = control
    y_rep = np.concatenate([y] * repeat, axis=0) if repeat > 1 else y
    emb = model.unet.embedding(t_arr, cond)
    return branch.features(Tensor(x), emb, Tensor(y_rep))


def _item_rngs(seed: int, n: int, item_offset: int) -> list[np.random.Generator]:
    return [
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(item_offset + i,)))
        for i in range(n)
    ]


def _stack_noise(rngs: Sequence[np.random.Generator], shape: tuple[int, ...]) -> np.ndarray:
    dt = T.get_default_dtype()
    return np.stack([r.standard_normal(shape).astype(dt) for r in rngs])


@dataclass
class SampleStats:
    noise_draws: int = 0
    model_calls: int = 0


def sample(
    model: GenerativeModel,
    schedule: NoiseSchedule,
    spec: SamplerSpec,
    prompt,
    n: int = 8,
    control=None,
    item_offset: int = 0,
    stats: Optional[SampleStats] = None,
) -> np.ndarray:
    """Generate n images for a prompt (or one prompt per item); returns an
    (n, C, H, W) array in [0, 1]. Deterministic samplers are bit-reproducible
    from (spec, prompt, item_offset)."""
    if spec.steps > schedule.timesteps:
        raise ValueError("steps must be <= schedule timesteps")
    prompts = [prompt] * n if isinstance(prompt, str) else list(prompt)
    if len(prompts) != n:
        raise ValueError(f"{len(prompts)} prompts for n={n}")
    cfg = model.config
    shape = (cfg.channels, cfg.image_size, cfg.image_size)
    rngs = _item_rngs(spec.seed, n, item_offset)
    with T.no_grad():
        cond = Tensor(model.text.encode_batch(prompts).data)

    def eps_fn(x, t):
        if stats is not None:
            stats.model_calls += 1
        return guided_eps(model, x, t, cond, spec.guidance, t_max=schedule.timesteps, control=control)

    def draw_noise():
        if stats is not None:
            stats.noise_draws += n
        return _stack_noise(rngs, shape)

    x = draw_noise()  # initial draw, all samplers

    if spec.kind == "ddim":
        ladder = timestep_ladder(schedule, spec.steps)
        pairs = list(zip(ladder, np.append(ladder[1:], -1)))
        for t, t_prev in pairs:
            eps_hat = eps_fn(x, int(t))
            noise = draw_noise() if (spec.eta > 0.0 and t_prev >= 0) else None
            x = ddim_step(x, eps_hat, int(t), int(t_prev), schedule, eta=spec.eta, noise=noise)
        final = x
    else:
        sigmas, t_idx = sigma_ladder(schedule, spec.steps)
        x = x * float(sigmas[0])
        denoised_prev, h_prev = None, None
        for i in range(spec.steps):
            sig, sig_next = float(sigmas[i]), float(sigmas[i + 1])
            x_in = (x / math.sqrt(1.0 + sig * sig)).astype(x.dtype)
            eps_hat = eps_fn(x_in, int(t_idx[i]))
            denoised = x - sig * eps_hat
            if spec.kind == "euler":
                x = euler_step(x, sig, sig_next, denoised)
            elif spec.kind == "euler_a":
                noise = draw_noise() if sig_next > 0.0 else None
                x = euler_ancestral_step(x, sig, sig_next, denoised, noise)
            else:  # dpmpp_2m
                x, h = dpmpp_2m_step(x, sig, sig_next, denoised, denoised_prev, h_prev)
                denoised_prev, h_prev = denoised, h
        final = x

    if not np.all(np.isfinite(final)):
        raise FloatingPointError("sampler produced non-finite values before clipping")
    return to_image_space(final)
