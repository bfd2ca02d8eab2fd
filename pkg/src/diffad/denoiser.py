"""Noise-prediction model contract, hybrid training objective, checkpoints.

The hybrid loss combines the mean-squared noise-prediction objective with a
down-weighted variational-bound term whose mean path is stop-gradiented, so
the variance head is the only thing the bound trains.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch

from . import rng
from .schedule import (
    NoiseSchedule,
    diffuse,
    interpolate_log_variance,
    posterior_mean_coeffs,
    schedule_from_descriptor,
)
from .unet import SmallUNet

LOG_2 = math.log(2.0)


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 64
    channel_multipliers: tuple = (1, 2, 2)
    attention_resolution: int = 16
    num_heads: int = 1
    image_channels: int = 3
    image_size: int = 64

    def __post_init__(self):
        levels = len(self.channel_multipliers)
        if self.image_size % (2 ** (levels - 1)) != 0:
            raise ValueError("image_size must be divisible by 2**(levels-1)")
        resolutions = {self.image_size // (2 ** i) for i in range(levels)}
        if self.attention_resolution not in resolutions:
            raise ValueError(
                f"attention_resolution {self.attention_resolution} not among "
                f"downsampled resolutions {sorted(resolutions)}"
            )

    @classmethod
    def full_scale(cls) -> "DenoiserConfig":
        return cls(base_channels=128, channel_multipliers=(1, 1, 2, 2, 4, 4),
                   attention_resolution=16, num_heads=1, image_size=256)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 2
    iterations: int = 3000
    lambda_vb: float = 0.001
    seed: int = 0
    use_ema: bool = False
    ema_decay: float = 0.999

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lambda_vb < 0:
            raise ValueError("lambda_vb must be >= 0")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")


@dataclass
class DenoiserOutput:
    eps_hat: torch.Tensor
    v: torch.Tensor  # elementwise in [0, 1]


def build_model(config: DenoiserConfig, init_seed: int = 0) -> SmallUNet:
    torch.manual_seed(rng.child_seed(init_seed, "model-init"))
    return SmallUNet(config)


def denoise_predict(model, x_t: torch.Tensor, t: int) -> DenoiserOutput:
    """Run the model on a batch (or single image) at step t."""
    single = x_t.dim() == 3
    xb = x_t[None] if single else x_t
    tb = torch.full((xb.shape[0],), t, dtype=torch.long)
    raw = model(xb, tb)
    c = xb.shape[1]
    eps_hat, raw_v = raw[:, :c], raw[:, c:]
    v = ((raw_v + 1.0) / 2.0).clamp(0.0, 1.0)
    if single:
        eps_hat, v = eps_hat[0], v[0]
    return DenoiserOutput(eps_hat=eps_hat, v=v)


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, k: int,
               schedule: NoiseSchedule) -> torch.Tensor:
    if eps_hat.shape != x_t.shape:
        raise ValueError("eps_hat shape must match x_t")
    ab = schedule.alpha_bar(k)
    if k < 1:
        raise ValueError(f"step index {k} outside [1, {schedule.T}]")
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def loss_simple(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    if eps.shape != eps_hat.shape:
        raise ValueError("shape mismatch")
    return ((eps - eps_hat) ** 2).mean()


def _gaussian_kl(mean1, logvar1, mean2, logvar2):
    return 0.5 * (
        logvar2 - logvar1
        + torch.exp(logvar1 - logvar2)
        + (mean1 - mean2) ** 2 * torch.exp(-logvar2)
        - 1.0
    )


def _approx_std_normal_cdf(z):
    # tanh approximation, standard for discretized Gaussian likelihoods
    return 0.5 * (1.0 + torch.tanh(math.sqrt(2.0 / math.pi) * (z + 0.044715 * z ** 3)))


def _discretized_gaussian_nll(x, mean, log_scale):
    """Negative log-likelihood of x (in [-1,1], 1/255-wide bins) under N(mean, scale^2)."""
    centered = x - mean
    inv_std = torch.exp(-log_scale)
    cdf_plus = _approx_std_normal_cdf(inv_std * (centered + 1.0 / 255.0))
    cdf_minus = _approx_std_normal_cdf(inv_std * (centered - 1.0 / 255.0))
    log_cdf_plus = torch.log(cdf_plus.clamp(min=1e-12))
    log_one_minus_cdf_minus = torch.log((1.0 - cdf_minus).clamp(min=1e-12))
    log_probs = torch.where(
        x < -0.999, log_cdf_plus,
        torch.where(x > 0.999, log_one_minus_cdf_minus,
                    torch.log((cdf_plus - cdf_minus).clamp(min=1e-12))),
    )
    return -log_probs


def loss_vb_term(x0: torch.Tensor, x_t: torch.Tensor, t: int,
                 model_mean: torch.Tensor, model_var: torch.Tensor,
                 schedule: NoiseSchedule) -> torch.Tensor:
    """One variational-bound term for step t, in bits per dimension.

    t >= 2: KL between the true denoising posterior and the model Gaussian.
    t == 1: discretized-Gaussian negative log-likelihood of x0.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    if torch.any(model_var <= 0):
        raise ValueError("model variance must be strictly positive")
    model_logvar = torch.log(model_var)
    if t == 1:
        nll = _discretized_gaussian_nll(x0, model_mean, 0.5 * model_logvar)
        return nll.mean() / LOG_2
    coef_x0, coef_xt = posterior_mean_coeffs(schedule, t)
    true_mean = coef_x0 * x0 + coef_xt * x_t
    true_logvar = torch.full_like(model_mean, math.log(schedule.posterior_var(t)))
    kl = _gaussian_kl(true_mean, true_logvar, model_mean, model_logvar)
    return kl.mean() / LOG_2


def model_mean_and_var(out: DenoiserOutput, x_t: torch.Tensor, t: int,
                       schedule: NoiseSchedule,
                       stop_mean_grad: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Posterior-mean and variance fields implied by a model output."""
    eps_hat = out.eps_hat.detach() if stop_mean_grad else out.eps_hat
    x0_hat = predict_x0(x_t, eps_hat, t, schedule)
    coef_x0, coef_xt = posterior_mean_coeffs(schedule, t)
    mean = coef_x0 * x0_hat + coef_xt * x_t
    var = interpolate_log_variance(out.v, t, schedule)
    return mean, var


def hybrid_loss(model, x0: torch.Tensor, t: int, noise: torch.Tensor,
                schedule: NoiseSchedule, lambda_vb: float) -> torch.Tensor:
    """L_simple + lambda * L_vb for one batch at a single step t."""
    x_t = diffuse(x0, t, noise, schedule)
    out = denoise_predict(model, x_t, t)
    loss = loss_simple(noise, out.eps_hat)
    if lambda_vb > 0:
        mean, var = model_mean_and_var(out, x_t, t, schedule, stop_mean_grad=True)
        loss = loss + lambda_vb * loss_vb_term(x0, x_t, t, mean, var, schedule)
    return loss


class Trainer:
    """Single-writer training loop around the hybrid objective."""

    def __init__(self, model, schedule: NoiseSchedule, cfg: TrainConfig):
        self.model = model
        self.schedule = schedule
        self.cfg = cfg
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        self.iteration = 0
        self.ema_params = (
            [p.detach().clone() for p in model.parameters()] if cfg.use_ema else None
        )

    def step(self, batch: torch.Tensor) -> float:
        """One optimizer update on a batch; returns the scalar loss."""
        if batch.numel() == 0:
            raise ValueError("batch must be nonempty")
        cfg = self.cfg
        # per-iteration step/noise draws keyed by (seed, iteration)
        t = int(rng.uniform_int(1, self.schedule.T + 1, (1,),
                                cfg.seed, "train-t", self.iteration)[0])
        noise = rng.normal(batch.shape, cfg.seed, "train-noise", self.iteration)
        self.optimizer.zero_grad()
        loss = hybrid_loss(self.model, batch, t, noise, self.schedule, cfg.lambda_vb)
        loss.backward()
        self.optimizer.step()
        if self.ema_params is not None:
            with torch.no_grad():
                for ema, p in zip(self.ema_params, self.model.parameters()):
                    ema.mul_(cfg.ema_decay).add_(p, alpha=1.0 - cfg.ema_decay)
        self.iteration += 1
        return float(loss.detach())


def training_step(trainer: Trainer, batch: torch.Tensor) -> float:
    return trainer.step(batch)


# -- checkpoint format: npz archive of parameter arrays plus a JSON header --

def save_checkpoint(path, model, config: DenoiserConfig, schedule_desc: dict,
                    seed: int, iteration: int, normal_reference=None):
    header = {
        "config": asdict(config),
        "schedule": schedule_desc,
        "seed": seed,
        "iteration": iteration,
        "format_version": 1,
    }
    arrays = {f"param/{name}": p.detach().numpy()
              for name, p in model.state_dict().items()}
    if normal_reference is not None:
        arrays["reference/mean_map"] = normal_reference.mean_map.numpy()
        header["reference"] = {"count": normal_reference.count,
                               "seed_policy": normal_reference.seed_policy}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Returns (model, config, schedule, header); reference restored if present."""
    from .scoring import NormalReference

    with np.load(path) as archive:
        header = json.loads(bytes(archive["header"]).decode())
        cfg_dict = dict(header["config"])
        cfg_dict["channel_multipliers"] = tuple(cfg_dict["channel_multipliers"])
        config = DenoiserConfig(**cfg_dict)
        model = SmallUNet(config)
        state = {name[len("param/"):]: torch.from_numpy(archive[name])
                 for name in archive.files if name.startswith("param/")}
        model.load_state_dict(state)
        model.eval()
        reference = None
        if "reference/mean_map" in archive.files:
            reference = NormalReference(
                mean_map=torch.from_numpy(archive["reference/mean_map"]),
                count=header["reference"]["count"],
                seed_policy=header["reference"]["seed_policy"],
            )
    sched = schedule_from_descriptor(header["schedule"])
    return model, config, sched, header, reference
