"""Deterministic, splittable random streams.

Every source of randomness in the toolkit is keyed by a tuple of hashable
parts (run seed, stream name, sample id, step index, ...).  The same key
always yields the same draws, independent of call order, which is what makes
scores, attacks and certifications byte-reproducible and lets different
reconstruction modes share per-step noise.
"""

from __future__ import annotations

import hashlib

import torch


def child_seed(*parts) -> int:
    """Derive a 63-bit seed from an arbitrary key tuple."""
    key = "\x1f".join(repr(p) for p in parts)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def generator(*parts) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(child_seed(*parts))
    return g


def normal(shape, *parts, dtype=torch.float32) -> torch.Tensor:
    """Standard-normal draw fully determined by the key tuple."""
    return torch.randn(shape, generator=generator(*parts), dtype=dtype)


def uniform_int(low: int, high: int, shape, *parts) -> torch.Tensor:
    """Uniform integers in [low, high), determined by the key tuple."""
    return torch.randint(low, high, shape, generator=generator(*parts))


class NoiseStream:
    """Per-sample noise source shared by the reconstruction algorithms.

    ``init_noise`` is the forward-diffusion draw; ``step_noise(dest)`` is the
    draw injected when sampling the iterate at step ``dest``.  Keying by the
    destination step (rather than loop position) is what makes full-shot and
    arbitrary-shot consume identical noise at shared steps.
    """

    def __init__(self, seed: int, sample_id="0"):
        self.seed = seed
        self.sample_id = sample_id

    def init_noise(self, shape) -> torch.Tensor:
        return normal(shape, self.seed, self.sample_id, "init")

    def step_noise(self, shape, dest_step: int) -> torch.Tensor:
        return normal(shape, self.seed, self.sample_id, "step", dest_step)
