"""Multiscale reconstruction-error scoring and the assembled detector.

The anomaly score of an image is the maximum absolute deviation of its
multiscale reconstruction-error map from the mean map of the normal training
set.  Downsampling is area-average pooling, upsampling nearest-neighbor, and
the averaged map is smoothed with a mean filter under reflect padding; all
operations are autograd-capable so attacks can differentiate through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from . import rng
from .reconstruction import ReconstructionConfig, reconstruct
from .rng import NoiseStream
from .schedule import NoiseSchedule

DEFAULT_SCALES = (1.0, 0.5, 0.25, 0.125)
MIN_SCALED_SIDE = 8


@dataclass
class NormalReference:
    mean_map: torch.Tensor      # H x W, elementwise mean of training error maps
    count: int
    seed_policy: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("reference needs at least one training image")


@dataclass
class AnomalyDetector:
    model: object
    schedule: NoiseSchedule
    recon_cfg: ReconstructionConfig
    reference: NormalReference
    scales: tuple = DEFAULT_SCALES
    filter_size: int = 11

    def __post_init__(self):
        if self.filter_size % 2 == 0:
            raise ValueError("filter_size must be odd")


def active_scales(scales, side: int):
    """Drop scales whose downsampled side would fall below the minimum."""
    kept = [l for l in scales if l * side >= MIN_SCALED_SIDE]
    return kept if kept else [max(scales)]


def _downsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return x
    return F.avg_pool2d(x[None], kernel_size=factor)[0]


def _upsample_nearest(m: torch.Tensor, factor: int) -> torch.Tensor:
    if factor == 1:
        return m
    return m.repeat_interleave(factor, dim=-2).repeat_interleave(factor, dim=-1)


def mean_filter(m: torch.Tensor, s: int) -> torch.Tensor:
    if s % 2 == 0:
        raise ValueError("mean filter size must be odd")
    if s == 1:
        return m
    pad = s // 2
    padded = F.pad(m[None, None], (pad, pad, pad, pad), mode="reflect")
    kernel = torch.full((1, 1, s, s), 1.0 / (s * s), dtype=m.dtype)
    return F.conv2d(padded, kernel)[0, 0]


def multiscale_error_map(x: torch.Tensor, x_tilde: torch.Tensor,
                         scales=DEFAULT_SCALES, s: int = 11) -> torch.Tensor:
    """Scale-averaged, mean-filtered channel-mean squared error (H x W)."""
    if x.shape != x_tilde.shape:
        raise ValueError("x and reconstruction must have the same shape")
    side = x.shape[-1]
    kept = active_scales(scales, side)
    total = None
    for l in kept:
        factor = round(1.0 / l)
        err = ((_downsample(x, factor) - _downsample(x_tilde, factor)) ** 2).mean(dim=0)
        err = _upsample_nearest(err, factor)
        total = err if total is None else total + err
    return mean_filter(total / len(kept), s)


def _error_map(x: torch.Tensor, detector_parts, stream: NoiseStream) -> torch.Tensor:
    model, schedule, recon_cfg, scales, s = detector_parts
    x_tilde = reconstruct(x, recon_cfg, model, schedule, stream)
    return multiscale_error_map(x, x_tilde, scales, s)


def reference_seed(run_seed: int, image_index: int, repeat: int = 0) -> int:
    return rng.child_seed(run_seed, "reference", image_index, repeat)


def fit_normal_reference(train_images, model, schedule: NoiseSchedule,
                         recon_cfg: ReconstructionConfig, run_seed: int,
                         scales=DEFAULT_SCALES, filter_size: int = 11,
                         repeats: int = 1) -> NormalReference:
    """Mean multiscale error map over reconstructed training normals."""
    if len(train_images) == 0:
        raise ValueError("training set is empty")
    parts = (model, schedule, recon_cfg, scales, filter_size)
    acc = None
    n = 0
    with torch.no_grad():
        for i, img in enumerate(train_images):
            for r in range(repeats):
                stream = NoiseStream(reference_seed(run_seed, i, r))
                emap = _error_map(img, parts, stream)
                acc = emap if acc is None else acc + emap
                n += 1
    return NormalReference(
        mean_map=acc / n,
        count=n,
        seed_policy={"run_seed": run_seed, "repeats": repeats,
                     "scheme": "hash(run_seed, 'reference', index, repeat)"},
    )


def _score_tensor(x: torch.Tensor, detector: AnomalyDetector,
                  stream: NoiseStream) -> torch.Tensor:
    parts = (detector.model, detector.schedule, detector.recon_cfg,
             detector.scales, detector.filter_size)
    emap = _error_map(x, parts, stream)
    dev = (emap - detector.reference.mean_map.to(emap.dtype)).abs()
    flat = dev.reshape(-1)
    # explicit argmax keeps the tie-break at the first row-major index
    return flat[torch.argmax(flat)]


def anomaly_score(x: torch.Tensor, detector: AnomalyDetector,
                  stream: NoiseStream) -> float:
    with torch.no_grad():
        return float(_score_tensor(x, detector, stream))


def score_gradient(x: torch.Tensor, detector: AnomalyDetector,
                   stream: NoiseStream) -> torch.Tensor:
    """Gradient of the score w.r.t. x under the stream's fixed noise draw."""
    x_req = x.detach().clone().requires_grad_(True)
    score = _score_tensor(x_req, detector, stream)
    score.backward()
    return x_req.grad.detach()


def as_score_function(detector: AnomalyDetector, sample_key, run_seed: int,
                      fixed_noise: bool = False):
    """Adapt a detector to the attack-facing score/gradient interface.

    ``score`` always uses the sample's fixed evaluation draw (so clean and
    adversarial inputs are compared under the same noise).  ``gradient``
    uses a fresh draw per call unless ``fixed_noise``; both are reproducible
    given (run_seed, sample_key).
    """
    from .attacks import ScoreFunction

    eval_stream = NoiseStream(rng.child_seed(run_seed, "eval", sample_key))
    counter = [0]

    def score(x):
        return anomaly_score(x, detector, eval_stream)

    def gradient(x):
        if fixed_noise:
            stream = eval_stream
        else:
            stream = NoiseStream(
                rng.child_seed(run_seed, "grad", sample_key, counter[0]))
            counter[0] += 1
        return score_gradient(x, detector, stream)

    return ScoreFunction(score=score, gradient=gradient, stochastic=not fixed_noise)


def as_bpda_score_function(detector: AnomalyDetector, sample_key, run_seed: int,
                           fixed_noise: bool = False):
    """Score function whose gradient treats the reconstruction as identity."""
    from types import SimpleNamespace

    from .attacks import ScoreFunction, bpda_gradient

    eval_stream = NoiseStream(rng.child_seed(run_seed, "eval", sample_key))
    counter = [0]

    def score(x):
        return anomaly_score(x, detector, eval_stream)

    def score_from_pair(x, u):
        emap = multiscale_error_map(x, u, detector.scales, detector.filter_size)
        dev = (emap - detector.reference.mean_map.to(emap.dtype)).abs()
        flat = dev.reshape(-1)
        return flat[torch.argmax(flat)]

    def gradient(x):
        if fixed_noise:
            stream = eval_stream
        else:
            stream = NoiseStream(
                rng.child_seed(run_seed, "grad", sample_key, counter[0]))
            counter[0] += 1
        pipeline = SimpleNamespace(
            reconstruct=lambda u: reconstruct(
                u, detector.recon_cfg, detector.model, detector.schedule, stream),
            score=score_from_pair,
        )
        return bpda_gradient(x, pipeline)

    return ScoreFunction(score=score, gradient=gradient, stochastic=not fixed_noise)
