"""Training objectives: supervised segmentation loss, the adversarial pair for
output-space alignment, the feature-matching perceptual loss, and the weighted
total used to update the segmenter.

Each written-per-image quantity is summed over pixels and averaged over the
batch, so the loss weights transfer across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import torch

from .errors import ConfigError
from .nets import FeaturePyramid

Scalar = Union[float, torch.Tensor]


@dataclass(frozen=True)
class LossWeights:
    """Weights of the segmenter's total objective plus the probability clamp floor."""

    lambda_seg: float = 100.0
    lambda_adv: float = 0.01
    lambda_per: float = 0.06
    eps: float = 1e-7

    def validate(self) -> None:
        if min(self.lambda_seg, self.lambda_adv, self.lambda_per) < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 < self.eps <= 1e-3:
            raise ConfigError(f"eps={self.eps} must lie in (0, 1e-3]")


@dataclass
class LossRecord:
    """All loss components of one training step."""

    step: int
    seg: float
    adv_gen: float
    per: float
    disc: float
    total: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "seg": self.seg,
            "adv_gen": self.adv_gen,
            "per": self.per,
            "disc": self.disc,
            "total": self.total,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LossRecord":
        return cls(
            step=int(data["step"]),
            seg=float(data["seg"]),
            adv_gen=float(data["adv_gen"]),
            per=float(data["per"]),
            disc=float(data["disc"]),
            total=float(data["total"]),
        )


def _require_finite(name: str, tensor: torch.Tensor) -> None:
    if not torch.isfinite(tensor).all():
        raise ValueError(f"{name} contains non-finite values")


def seg_loss(probs: torch.Tensor, labels_onehot: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Pixel-summed cross entropy between a probability map and one-hot labels."""
    if probs.shape != labels_onehot.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs labels {tuple(labels_onehot.shape)}")
    _require_finite("probs", probs)
    _require_finite("labels", labels_onehot)
    per_image = -(labels_onehot * torch.log(probs.clamp(eps, 1.0))).sum(dim=(1, 2, 3))
    return per_image.mean()


def adv_gen_loss(patch_scores: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """Generator-side adversarial loss on target patch scores.

    Pushes the discriminator's probability-of-source toward 1 on target
    predictions. Callers must exclude discriminator parameters from the
    gradient (the trainer freezes them for this pass).
    """
    _require_finite("patch_scores", patch_scores)
    per_image = -torch.log(patch_scores.clamp(eps, 1.0)).sum(dim=tuple(range(1, patch_scores.dim())))
    return per_image.mean()


def disc_loss(
    scores_source: torch.Tensor, scores_target: torch.Tensor, eps: float = 1e-7
) -> torch.Tensor:
    """Two-term patch discriminator objective: source is real, target is fake.

    Must be computed on predictions detached from the segmenter's graph.
    """
    _require_finite("scores_source", scores_source)
    _require_finite("scores_target", scores_target)
    dims_s = tuple(range(1, scores_source.dim()))
    dims_t = tuple(range(1, scores_target.dim()))
    real = -torch.log(scores_source.clamp(eps, 1.0)).sum(dim=dims_s).mean()
    fake = -torch.log((1.0 - scores_target).clamp(eps, 1.0)).sum(dim=dims_t).mean()
    return real + fake


def perceptual_loss(pred_pyramid: FeaturePyramid, label_pyramid: FeaturePyramid) -> torch.Tensor:
    """Sum over pyramid levels of the mean absolute feature difference.

    The label side carries no gradient; the 1/N normalization makes each
    level's contribution a mean over all its elements.
    """
    if len(pred_pyramid.levels) != len(label_pyramid.levels):
        raise ValueError("feature pyramids have different depths")
    total = None
    for level, (a, b) in enumerate(zip(pred_pyramid.levels, label_pyramid.levels)):
        if a.shape != b.shape:
            raise ValueError(
                f"pyramid level {level} shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}"
            )
        term = (a - b.detach()).abs().mean()
        total = term if total is None else total + term
    return total


def total_loss(seg: Scalar, adv_gen: Scalar, per: Scalar, weights: LossWeights) -> Scalar:
    """Weighted segmenter objective; the discriminator's own loss is separate."""
    return weights.lambda_seg * seg + weights.lambda_adv * adv_gen + weights.lambda_per * per
