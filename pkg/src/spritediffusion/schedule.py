"""Noise schedule tables and the forward noising process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

DEFAULT_TIMESTEPS = 400
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta / alpha-bar / sigma tables shared by training and samplers.

    sigma[t] = sqrt((1 - alpha_bar[t]) / alpha_bar[t]) is the noise level used
    by the sigma-space samplers."""

    timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def sqrt_alpha_bar(self, t) -> np.ndarray:
        return np.sqrt(self.alpha_bar[t])

    def sqrt_one_minus_alpha_bar(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar[t])


def make_schedule(
    timesteps: int = DEFAULT_TIMESTEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linear beta schedule; tables are float64 for downstream exactness checks."""
    if timesteps < 2:
        raise ValueError(f"timesteps must be >= 2, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt((1.0 - alpha_bar) / alpha_bar)
    return NoiseSchedule(timesteps, beta, alpha, alpha_bar, sigma)


def q_sample(x0: Tensor, t, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Forward-noise x0 to timestep t: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"q_sample: eps shape {eps.shape} != x0 shape {x0.shape}")
    t = np.asarray(t).reshape(-1)
    if np.any(t < 0) or np.any(t >= schedule.timesteps):
        raise ValueError(f"timestep out of range [0, {schedule.timesteps})")
    dt = T.get_default_dtype()
    extra = (1,) * (x0.ndim - 1)
    a = schedule.sqrt_alpha_bar(t).astype(dt).reshape((-1,) + extra)
    b = schedule.sqrt_one_minus_alpha_bar(t).astype(dt).reshape((-1,) + extra)
    if a.shape[0] not in (1, x0.shape[0]):
        raise ShapeError(f"q_sample: {a.shape[0]} timesteps for batch of {x0.shape[0]}")
    return T.mul(x0, Tensor(a)) + T.mul(eps, Tensor(b))
