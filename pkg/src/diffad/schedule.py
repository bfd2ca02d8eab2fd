"""Variance schedules and forward-diffusion math.

All per-step arrays are precomputed in double precision at construction;
step indices are 1-based (t in [1, T]) to match the process definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed beta_t, alpha_t, alpha_bar_t and posterior variances.

    Immutable after construction; safe for concurrent reads.  ``descriptor``
    is the compact form serialized into experiment records.
    """

    T: int
    betas: np.ndarray          # beta_t, shape (T,)
    alphas: np.ndarray         # 1 - beta_t
    alpha_bars: np.ndarray     # cumulative product of alphas
    posterior_vars: np.ndarray  # beta~_t, with beta~_1 := beta_1
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        b = self.betas
        if np.any(b <= 0.0) or np.any(b >= 1.0):
            raise ValueError("all beta_t must lie in (0, 1)")
        ab = self.alpha_bars
        if np.any(ab <= 0.0) or np.any(ab >= 1.0) or np.any(np.diff(ab) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing in (0, 1)")

    # -- 1-based lookups -------------------------------------------------
    def beta(self, t: int) -> float:
        self._check_step(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_step(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        # alpha_bar(0) == 1 by convention
        if t == 0:
            return 1.0
        self._check_step(t)
        return float(self.alpha_bars[t - 1])

    def posterior_var(self, t: int) -> float:
        self._check_step(t)
        return float(self.posterior_vars[t - 1])

    def _check_step(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"step index {t} outside [1, {self.T}]")


def _derive(betas: np.ndarray, descriptor: dict) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_vars = (1.0 - alpha_bar_prev) / (1.0 - alpha_bars) * betas
    posterior_vars[0] = betas[0]  # beta~_1 := beta_1 (alpha_bar_0 := 1)
    return NoiseSchedule(
        T=len(betas),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
        descriptor=descriptor,
    )


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced beta_t from beta_start (t=1) to beta_end (t=T)."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return _derive(betas, {"type": "linear", "T": T,
                           "beta_start": beta_start, "beta_end": beta_end})


def make_cosine_schedule(T: int, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Squared-cosine alpha_bar profile with a small offset; beta clipped below max_beta."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")

    def profile(u: float) -> float:
        return math.cos((u + offset) / (1.0 + offset) * math.pi / 2.0) ** 2

    betas = np.empty(T, dtype=np.float64)
    for t in range(1, T + 1):
        betas[t - 1] = min(1.0 - profile(t / T) / profile((t - 1) / T), max_beta)
    return _derive(betas, {"type": "cosine", "T": T,
                           "beta_start": float(betas[0]), "beta_end": float(betas[-1])})


def schedule_from_descriptor(desc: dict) -> NoiseSchedule:
    if desc["type"] == "linear":
        return make_linear_schedule(desc["T"], desc["beta_start"], desc["beta_end"])
    if desc["type"] == "cosine":
        return make_cosine_schedule(desc["T"])
    raise ValueError(f"unknown schedule type {desc['type']!r}")


def diffuse(x0: torch.Tensor, k: int, noise: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward diffusion: sqrt(alpha_bar_k) x0 + sqrt(1 - alpha_bar_k) noise."""
    if noise.shape != x0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != x0 shape {tuple(x0.shape)}")
    ab = schedule.alpha_bar(k)
    if k < 1:
        raise ValueError(f"step index {k} outside [1, {schedule.T}]")
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def posterior_mean_coeffs(schedule: NoiseSchedule, t: int,
                          cumulative_xt_coef: bool = False) -> tuple[float, float]:
    """Coefficients (on predicted x0 and on x_t) of the denoising posterior mean.

    ``cumulative_xt_coef`` switches the x_t coefficient from sqrt(alpha_t) to
    sqrt(alpha_bar_t) for empirical comparison of the two conventions.
    """
    schedule._check_step(t)
    if t == 1:
        # alpha_bar_0 := 1 makes the posterior collapse onto the x0 prediction
        return 1.0, 0.0
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t - 1)
    beta_t = schedule.beta(t)
    coef_x0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    root = ab_t if cumulative_xt_coef else schedule.alpha(t)
    coef_xt = math.sqrt(root) * (1.0 - ab_prev) / (1.0 - ab_t)
    return coef_x0, coef_xt


def interpolate_log_variance(v: torch.Tensor, t: int, schedule: NoiseSchedule) -> torch.Tensor:
    """Log-domain interpolation between beta_t (v=1) and beta~_t (v=0)."""
    if torch.any(v < 0) or torch.any(v > 1):
        raise ValueError("interpolation field must lie in [0, 1]")
    log_beta = math.log(schedule.beta(t))
    log_post = math.log(schedule.posterior_var(t))
    return torch.exp(v * log_beta + (1.0 - v) * log_post)
