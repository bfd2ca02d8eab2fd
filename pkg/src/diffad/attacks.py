"""Detector-agnostic adversarial evaluation.

The attack objective is y * score(x): ascent raises scores of normals
(y=+1) and lowers scores of anomalies (y=-1).  Budgets are quoted on the
[0,1] pixel scale and converted to the detector's clamp domain internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy.stats import rankdata

GRAD_NORM_FLOOR = 1e-12


@dataclass
class ScoreFunction:
    score: Callable[[torch.Tensor], float]
    gradient: Callable[[torch.Tensor], torch.Tensor]
    stochastic: bool = False


@dataclass
class LabeledSample:
    x: torch.Tensor
    y: int            # +1 normal, -1 anomalous
    sample_id: str = "0"

    def __post_init__(self):
        if self.y not in (-1, 1):
            raise ValueError("label must be -1 or +1")


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 2.0 / 255.0   # on the [0,1] pixel scale
    alpha: float | None = None     # default eps/10 (linf) or eps/4 (l2)
    iters: int = 40
    eot_samples: int = 0           # 0 disables EOT
    bpda: bool = False
    clamp_domain: tuple = (-1.0, 1.0)
    random_start: bool = False
    fixed_noise: bool = False

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ValueError("norm must be 'linf' or 'l2'")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.iters < 1:
            raise ValueError("iters must be >= 1")
        # alpha = 0 is allowed: it expresses the no-op attack used as the
        # epsilon -> 0 reference point.
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")

    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return self.epsilon / 10.0 if self.norm == "linf" else self.epsilon / 4.0


def attack_objective(score: float, y: int) -> float:
    if y not in (-1, 1):
        raise ValueError("label must be -1 or +1")
    return y * score


def project_linf(x_cand: torch.Tensor, x_orig: torch.Tensor, epsilon: float,
                 domain: tuple = (-1.0, 1.0)) -> torch.Tensor:
    if x_cand.shape != x_orig.shape:
        raise ValueError("shape mismatch")
    out = torch.clamp(x_cand, x_orig - epsilon, x_orig + epsilon)
    return torch.clamp(out, domain[0], domain[1])


def project_l2(x_cand: torch.Tensor, x_orig: torch.Tensor, epsilon: float,
               domain: tuple = (-1.0, 1.0)) -> torch.Tensor:
    if x_cand.shape != x_orig.shape:
        raise ValueError("shape mismatch")
    delta = x_cand - x_orig
    norm = torch.linalg.vector_norm(delta)
    if norm > epsilon:
        delta = delta * (epsilon / norm)
    return torch.clamp(x_orig + delta, domain[0], domain[1])


def eot_gradient(x: torch.Tensor, f: ScoreFunction, M: int) -> torch.Tensor:
    """Mean of M gradient calls, each under an independent internal draw."""
    if M < 1:
        raise ValueError("EOT needs M >= 1; use M = 0 at the call site to bypass")
    acc = f.gradient(x)
    for _ in range(M - 1):
        acc = acc + f.gradient(x)
    return acc / M


def bpda_gradient(x: torch.Tensor, pipeline) -> torch.Tensor:
    """Gradient of score(reconstruct(x)) treating reconstruct as identity.

    ``pipeline`` exposes ``reconstruct(x) -> tensor`` and a differentiable
    ``score(x, u) -> scalar tensor`` taking the input and the reconstruction.
    """
    x_req = x.detach().clone().requires_grad_(True)
    with torch.no_grad():
        u = pipeline.reconstruct(x_req.detach())
    # straight-through: forward value is reconstruct(x), backward Jacobian is I
    u_sur = x_req + (u - x_req).detach()
    s = pipeline.score(x_req, u_sur)
    s.backward()
    return x_req.grad.detach()


def pgd(sample: LabeledSample, f: ScoreFunction, cfg: AttackConfig,
        start_noise: torch.Tensor | None = None) -> torch.Tensor:
    """N-step projected gradient ascent on y * score(x)."""
    lo, hi = cfg.clamp_domain
    scale = hi - lo  # pixel-scale budgets -> model domain
    eps = cfg.epsilon * scale
    alpha = cfg.step_size() * scale
    project = project_linf if cfg.norm == "linf" else project_l2

    x_orig = sample.x.detach()
    x = x_orig.clone()
    if cfg.random_start:
        if start_noise is None:
            raise ValueError("random_start requires start_noise")
        x = project(x + eps * start_noise, x_orig, eps, cfg.clamp_domain)

    for _ in range(cfg.iters):
        if cfg.eot_samples > 0:
            g = eot_gradient(x, f, cfg.eot_samples)
        else:
            g = f.gradient(x)
        g = sample.y * g
        if cfg.norm == "linf":
            step = alpha * torch.sign(g)
        else:
            gnorm = torch.linalg.vector_norm(g)
            if gnorm < GRAD_NORM_FLOOR:
                continue
            step = alpha * g / gnorm
        x = project(x + step, x_orig, eps, cfg.clamp_domain)
    return x


def check_feasible(x_adv: torch.Tensor, x_orig: torch.Tensor,
                   cfg: AttackConfig, tol: float = 1e-6) -> bool:
    lo, hi = cfg.clamp_domain
    eps = cfg.epsilon * (hi - lo)
    delta = x_adv - x_orig
    if cfg.norm == "linf":
        ok = float(delta.abs().max()) <= eps + tol
    else:
        ok = float(torch.linalg.vector_norm(delta)) <= eps + tol
    return ok and bool((x_adv >= lo - tol).all()) and bool((x_adv <= hi + tol).all())


def roc_auc(scores, labels) -> float:
    """AUC with anomalies (label -1) as the positive class; ties count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == -1]
    neg = scores[labels == 1]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def evaluate_robust_auc(samples, score_fn_for, cfg: AttackConfig):
    """Clean and post-attack AUC over a labeled test set.

    ``score_fn_for(sample)`` returns the sample's ScoreFunction; its
    ``score`` must be deterministic per sample so that clean and adversarial
    inputs are compared under the same internal draw.  Returns
    (standard_auc, robust_auc, per-sample records).
    """
    records = []
    for sample in samples:
        f = score_fn_for(sample)
        clean = f.score(sample.x)
        x_adv = pgd(sample, f, cfg)
        assert check_feasible(x_adv, sample.x, cfg), "infeasible adversarial example"
        adv = f.score(x_adv)
        records.append({"sample_id": sample.sample_id, "label": sample.y,
                        "clean_score": clean, "adv_score": adv})
    labels = [r["label"] for r in records]
    standard = roc_auc([r["clean_score"] for r in records], labels)
    robust = roc_auc([r["adv_score"] for r in records], labels)
    return standard, robust, records
