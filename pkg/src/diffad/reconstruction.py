"""Robust reconstruction: noise an input to step k, then denoise.

Three denoising modes share one strided engine: one-shot (single inversion of
the forward equation), full-shot (every step from k down to 1) and
arbitrary-shot (any strictly decreasing step schedule ending at k).  Because
the two named modes are thin wrappers over the strided engine and all noise
is drawn from a destination-step-keyed stream, the documented equivalences
hold bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .denoiser import denoise_predict, predict_x0
from .rng import NoiseStream
from .schedule import NoiseSchedule, diffuse

MODES = ("one_shot", "full_shot", "arbitrary_shot")


@dataclass(frozen=True)
class ReconstructionConfig:
    k: int = 100
    mode: str = "one_shot"
    steps: tuple | None = None   # arbitrary mode: strictly decreasing, steps[0] == k
    seed: int = 0
    cumulative_xt_coef: bool = False  # use sqrt(alpha_bar) on the x_t posterior term

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode == "arbitrary_shot":
            s = self.steps
            if not s or s[0] != self.k or s[-1] < 1:
                raise ValueError("steps must start at k and end at >= 1")
            if any(a <= b for a, b in zip(s, s[1:])):
                raise ValueError("steps must be strictly decreasing")

    def step_sequence(self) -> tuple:
        if self.mode == "one_shot":
            return (self.k,)
        if self.mode == "full_shot":
            return tuple(range(self.k, 0, -1))
        return tuple(self.steps)


def _strided_coeffs(schedule: NoiseSchedule, t_hi: int, t_lo: int,
                    cumulative_xt_coef: bool) -> tuple[float, float, float, float]:
    """Posterior coefficients and (beta, beta~) for the stride t_hi -> t_lo."""
    ab_hi = schedule.alpha_bar(t_hi)
    ab_lo = schedule.alpha_bar(t_lo)
    beta = 1.0 - ab_hi / ab_lo
    post_var = beta if t_lo == 0 else (1.0 - ab_lo) / (1.0 - ab_hi) * beta
    coef_x0 = math.sqrt(ab_lo) * beta / (1.0 - ab_hi)
    root = ab_hi if cumulative_xt_coef else ab_hi / ab_lo
    coef_xt = math.sqrt(root) * (1.0 - ab_lo) / (1.0 - ab_hi)
    return coef_x0, coef_xt, beta, post_var


def _denoise(x: torch.Tensor, steps: tuple, cfg: ReconstructionConfig, model,
             schedule: NoiseSchedule, stream: NoiseStream) -> torch.Tensor:
    k = steps[0]
    x_t = diffuse(x, k, stream.init_noise(x.shape), schedule)
    x0_hat = x_t
    for i, t in enumerate(steps):
        out = denoise_predict(model, x_t, t)
        x0_hat = predict_x0(x_t, out.eps_hat, t, schedule)
        if i < len(steps) - 1:
            t_lo = steps[i + 1]
            coef_x0, coef_xt, beta, post_var = _strided_coeffs(
                schedule, t, t_lo, cfg.cumulative_xt_coef)
            mean = coef_x0 * x0_hat + coef_xt * x_t
            # log-interpolated variance using the strided beta pair
            var = torch.exp(out.v * math.log(beta) + (1.0 - out.v) * math.log(post_var))
            z = stream.step_noise(x.shape, t_lo)
            x_t = mean + torch.sqrt(var) * z
    return x0_hat


def reconstruct(x: torch.Tensor, cfg: ReconstructionConfig, model,
                schedule: NoiseSchedule, stream: NoiseStream) -> torch.Tensor:
    """Dispatch on cfg.mode; deterministic given the stream's key."""
    return _denoise(x, cfg.step_sequence(), cfg, model, schedule, stream)


def one_shot(x, cfg, model, schedule, stream):
    return _denoise(x, (cfg.k,), cfg, model, schedule, stream)


def full_shot(x, cfg, model, schedule, stream):
    return _denoise(x, tuple(range(cfg.k, 0, -1)), cfg, model, schedule, stream)


def arbitrary_shot(x, cfg, model, schedule, stream):
    if not cfg.steps:
        raise ValueError("arbitrary_shot needs cfg.steps")
    return _denoise(x, tuple(cfg.steps), cfg, model, schedule, stream)
