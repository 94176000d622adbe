"""Loss terms for the style reconstruction model and their weighted sum.

Discriminators minimize -log D(real) - log(1 - D(fake)); the generator
minimizes the non-saturating -log D(fake). All probabilities are clamped
to [eps, 1-eps] before any log, so every term is finite and non-negative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError, ShapeMismatchError

PROB_EPS = 1e-7

STAGE_TERMS = {
    1: ("gan1", "l1"),
    2: ("gan1", "l1", "gan2"),
    3: ("gan1", "l1", "gan2", "task"),
}


@dataclass(frozen=True)
class LossWeights:
    """Published defaults: gan1=1, gan2=1, l1=100, task=10."""

    gan1: float = 1.0
    gan2: float = 1.0
    l1: float = 100.0
    task: float = 10.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (math.isfinite(value) and value >= 0.0):
                raise ConfigError(f"loss weight {name} must be finite and >= 0")

    def get(self, term: str) -> float:
        return getattr(self, term)


def clamp_probs(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def _adversarial_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    d_real = clamp_probs(d_real)
    d_fake = clamp_probs(d_fake)
    return -(torch.log(d_real).mean() + torch.log(1.0 - d_fake).mean())


def gan1_d_loss(d1_real: torch.Tensor, d1_fake: torch.Tensor) -> torch.Tensor:
    """Intra-domain discriminator loss: real = source images, fake =
    reconstructions from source GM."""
    return _adversarial_d_loss(d1_real, d1_fake)


def gan2_d_loss(d2_real: torch.Tensor, d2_fake: torch.Tensor) -> torch.Tensor:
    """Inter-domain discriminator loss: real = source images, fake =
    reconstructions from *target* GM. Same function as gan1_d_loss; only
    the data routing differs."""
    return _adversarial_d_loss(d2_real, d2_fake)


def gan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator loss: -mean log D(fake)."""
    return -torch.log(clamp_probs(d_fake)).mean()


def l1_loss(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if recon.shape != target.shape:
        raise ShapeMismatchError(
            f"l1_loss shapes differ: {tuple(recon.shape)} vs {tuple(target.shape)}"
        )
    return (recon - target).abs().mean()


def task_loss(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of task predictions on reconstructions against
    the source labels."""
    p = clamp_probs(probs)
    y = labels.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


@dataclass
class LossBundle:
    """Per-term values for one step; inactive terms are absent, not zero."""

    stage: int
    terms: dict = field(default_factory=dict)
    total: torch.Tensor | float = 0.0


def total_objective(
    terms: dict[str, torch.Tensor | float],
    weights: LossWeights,
    stage: int,
) -> LossBundle:
    """Weighted sum of the stage's active terms.

    Stage 1 activates gan1 + l1; stage 2 adds gan2; stage 3 adds task.
    """
    if stage not in STAGE_TERMS:
        raise ConfigError(f"stage must be 1, 2, or 3, got {stage}")
    active = STAGE_TERMS[stage]
    missing = [t for t in active if t not in terms]
    if missing:
        raise ConfigError(f"stage {stage} requires terms {missing}")
    bundle = LossBundle(stage=stage)
    total = None
    for name in active:
        bundle.terms[name] = terms[name]
        contribution = weights.get(name) * terms[name]
        total = contribution if total is None else total + contribution
    bundle.total = total
    return bundle
