"""Noise schedules, the closed-form diffusion forward map, the straight
interpolation path, and time-grid bookkeeping.

All maps here are pure functions; they accept either numpy arrays or
numcore Tensors (the arithmetic is written with operators that both
support), so training code can differentiate through them while samplers
run them on raw arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

__all__ = [
    "NoiseSchedule",
    "FlowTimeGrid",
    "sqrt_noise_schedule",
    "diffusion_forward",
    "flow_interpolate",
    "rescale_time",
    "ancestral_posterior",
]

_ALPHA_BAR_FLOOR = 1e-5


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion coefficients, indexed 1..num_steps.

    Arrays are stored with a leading dummy slot so ``betas[t]`` means step
    t. ``alpha_bars`` is strictly decreasing in (0, 1).
    """

    num_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        ab = self.alpha_bars[1:]
        if not (np.all(ab > 0.0) and np.all(ab < 1.0) and np.all(np.diff(ab) < 0.0)):
            raise ValueError("alpha_bars must be strictly decreasing in (0, 1)")

    def alpha_bar(self, t_step: int) -> float:
        """alpha_bar at step t_step, with alpha_bar(0) = 1 by convention."""
        if not 0 <= t_step <= self.num_steps:
            raise ValueError(f"t_step {t_step} outside [0, {self.num_steps}]")
        return 1.0 if t_step == 0 else float(self.alpha_bars[t_step])


def sqrt_noise_schedule(num_steps: int, shift: float = 1e-4) -> NoiseSchedule:
    """alpha_bar_t = 1 - sqrt(t/num_steps + shift), floored at a small
    positive value (the raw formula dips below zero at the final step)."""
    t = np.arange(0, num_steps + 1, dtype=np.float64)
    alpha_bars = 1.0 - np.sqrt(t / num_steps + shift)
    alpha_bars[0] = 1.0
    alpha_bars = np.maximum(alpha_bars, _ALPHA_BAR_FLOOR)
    alphas = alpha_bars[1:] / alpha_bars[:-1]
    betas = 1.0 - alphas
    pad = lambda a: np.concatenate([[np.nan], a])
    return NoiseSchedule(
        num_steps=num_steps,
        betas=pad(betas),
        alphas=pad(alphas),
        alpha_bars=alpha_bars,
    )


@dataclass(frozen=True)
class FlowTimeGrid:
    """Uniform grid t_k = k/num_steps for k = 0..num_steps.

    dt is kept as an exact rational so dt * num_steps == 1 holds without
    float drift; convert at the use site.
    """

    num_steps: int = 20
    rescale_max: float = 1000.0
    dt: Fraction = field(init=False)

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        object.__setattr__(self, "dt", Fraction(1, self.num_steps))

    def t_at(self, step: int) -> float:
        """Grid time k/num_steps as float; step 0 is the clean endpoint
        and is never fed to the model."""
        if not 0 <= step <= self.num_steps:
            raise ValueError(f"step {step} outside [0, {self.num_steps}]")
        return step / self.num_steps


def diffusion_forward(z0, eps, t_step: int, sched: NoiseSchedule):
    """Closed-form forward corruption:
    sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps."""
    if not 1 <= t_step <= sched.num_steps:
        raise ValueError(f"t_step {t_step} outside [1, {sched.num_steps}]")
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(eps.shape)}")
    ab = sched.alpha_bar(t_step)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


def flow_interpolate(z0, z1, t: float):
    """Straight path t*z1 + (1-t)*z0 from data (t=0) to noise (t=1)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t={t} outside [0, 1]")
    if z0.shape != z1.shape:
        raise ValueError(f"shape mismatch: {tuple(z0.shape)} vs {tuple(z1.shape)}")
    return t * z1 + (1.0 - t) * z0


def rescale_time(t_step: int, num_steps: int, rescale_max: float = 1000.0) -> float:
    """Map grid step onto the pretrained time convention:
    rescale_max * t_step / num_steps."""
    if not 1 <= t_step <= num_steps:
        raise ValueError(f"t_step {t_step} outside [1, {num_steps}]")
    return rescale_max * t_step / num_steps


def ancestral_posterior(z_t, z0_pred, t_step: int, sched: NoiseSchedule, noise_draw):
    """One reverse step of the Gaussian posterior q(z_{t-1} | z_t, z0).

    mean = sqrt(alpha_bar_{t-1}) * beta_t / (1 - alpha_bar_t) * z0_pred
         + sqrt(alpha_t) * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * z_t
    var  = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t

    At t_step == 1 the noise term is omitted and the mean is returned.
    """
    if not 1 <= t_step <= sched.num_steps:
        raise ValueError(f"t_step {t_step} outside [1, {sched.num_steps}]")
    ab_t = sched.alpha_bar(t_step)
    ab_prev = sched.alpha_bar(t_step - 1)
    beta_t = float(sched.betas[t_step])
    alpha_t = float(sched.alphas[t_step])
    denom = 1.0 - ab_t
    coef_z0 = math.sqrt(ab_prev) * beta_t / denom
    coef_zt = math.sqrt(alpha_t) * (1.0 - ab_prev) / denom
    mean = coef_z0 * z0_pred + coef_zt * z_t
    if t_step == 1:
        return mean
    var = (1.0 - ab_prev) / denom * beta_t
    return mean + math.sqrt(var) * noise_draw
