"""Small U-Net noise predictor with sinusoidal time embedding.

The network outputs 2*C channels: predicted noise and a raw variance
interpolation field (squashed downstream).  Residual blocks carry the time
embedding; self-attention is applied at a single configured resolution.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos positional embedding of integer timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.device)
    angles = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SelfAttention2d(nn.Module):
    def __init__(self, channels: int, num_heads: int = 1):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError("channels must be divisible by num_heads")
        self.norm = _norm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.num_heads = num_heads

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x))
        q, k, v = qkv.reshape(b, 3, self.num_heads, c // self.num_heads, h * w).unbind(1)
        attn = torch.softmax(q.transpose(-2, -1) @ k / math.sqrt(c // self.num_heads), dim=-1)
        out = (v @ attn.transpose(-2, -1)).reshape(b, c, h, w)
        return x + self.proj(out)


class SmallUNet(nn.Module):
    """U-Net mapping (x_t, t) -> concatenated [noise prediction, raw variance field]."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        ch = config.base_channels
        mults = tuple(config.channel_multipliers)
        emb_dim = ch * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(ch, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.base_channels = ch

        self.stem = nn.Conv2d(config.image_channels, ch, 3, padding=1)

        res = config.image_size
        chans = [ch * m for m in mults]
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        skip_chans = []
        in_ch = ch
        for i, out_ch in enumerate(chans):
            self.down_blocks.append(ResBlock(in_ch, out_ch, emb_dim))
            self.down_attn.append(
                SelfAttention2d(out_ch, config.num_heads)
                if res == config.attention_resolution else nn.Identity()
            )
            skip_chans.append(out_ch)
            in_ch = out_ch
            if i < len(chans) - 1:
                self.downsamples.append(nn.Conv2d(out_ch, out_ch, 3, stride=2, padding=1))
                res //= 2

        self.mid1 = ResBlock(in_ch, in_ch, emb_dim)
        self.mid_attn = (
            SelfAttention2d(in_ch, config.num_heads)
            if res == config.attention_resolution else nn.Identity()
        )
        self.mid2 = ResBlock(in_ch, in_ch, emb_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i, out_ch in reversed(list(enumerate(chans))):
            self.up_blocks.append(ResBlock(in_ch + skip_chans.pop(), out_ch, emb_dim))
            self.up_attn.append(
                SelfAttention2d(out_ch, config.num_heads)
                if res == config.attention_resolution else nn.Identity()
            )
            in_ch = out_ch
            if i > 0:
                self.upsamples.append(nn.Conv2d(out_ch, out_ch, 3, padding=1))
                res *= 2

        self.head = nn.Sequential(
            _norm(in_ch), nn.SiLU(),
            nn.Conv2d(in_ch, 2 * config.image_channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        emb = self.time_mlp(sinusoidal_embedding(t, self.base_channels).to(x.dtype))
        h = self.stem(x)
        skips = []
        n = len(self.down_blocks)
        for i in range(n):
            h = self.down_blocks[i](h, emb)
            h = self.down_attn[i](h)
            skips.append(h)
            if i < n - 1:
                h = self.downsamples[i](h)
        h = self.mid2(self.mid_attn(self.mid1(h, emb)), emb)
        for i in range(n):
            h = self.up_blocks[i](torch.cat([h, skips.pop()], dim=1), emb)
            h = self.up_attn[i](h)
            if i < n - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsamples[i](h)
        return self.head(h)
