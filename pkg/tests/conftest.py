import math

import pytest
import torch
import torch.nn as nn

from diffad import denoiser, schedule
from diffad.rng import NoiseStream


class ExactNoiseOracle(nn.Module):
    """Model stub returning exactly the noise that explains x_t given x0."""

    def __init__(self, x0, sched):
        super().__init__()
        self.x0 = x0
        self.sched = sched

    def forward(self, x_t, t):
        ab = self.sched.alpha_bar(int(t[0]))
        eps = (x_t - math.sqrt(ab) * self.x0[None]) / math.sqrt(1.0 - ab)
        return torch.cat([eps, torch.zeros_like(eps)], dim=1)


class ConstantModel(nn.Module):
    """Model stub with a fixed eps prediction (broadcast over the batch)."""

    def __init__(self, eps_value: float = 0.0, v_raw: float = 0.0):
        super().__init__()
        self.eps_value = eps_value
        self.v_raw = v_raw

    def forward(self, x_t, t):
        eps = torch.full_like(x_t, self.eps_value)
        return torch.cat([eps, torch.full_like(x_t, self.v_raw)], dim=1)


class ZeroStream(NoiseStream):
    """Noise stream with every draw forced to zero."""

    def __init__(self):
        super().__init__(0)

    def init_noise(self, shape):
        return torch.zeros(shape)

    def step_noise(self, shape, dest_step):
        return torch.zeros(shape)


@pytest.fixture(scope="session")
def tiny_cfg():
    return denoiser.DenoiserConfig(
        base_channels=16, channel_multipliers=(1, 2), attention_resolution=8,
        num_heads=1, image_channels=3, image_size=16)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    model = denoiser.build_model(tiny_cfg, init_seed=7)
    model.eval()
    return model


@pytest.fixture(scope="session")
def sched100():
    return schedule.make_linear_schedule(100, 1e-3, 0.05)
