"""
Loss Functions Module

Training objectives of the semantic-decomposition network:

- per-branch segmentation cross-entropy on the 2-class mask heads
- compound boundary loss (alpha * BCE + beta * Dice) for the structural constraint
- cosine-similarity contrastive constraint between the branch embeddings
- the total loss summing all enabled terms

Every function accepts a single sample or a batch (leading batch dimension)
and returns the batch mean of the per-sample loss.
"""

import math
from dataclasses import dataclass, fields
from typing import AbstractSet, Dict, Mapping

import torch
import torch.nn.functional as F

from src.errors import ConfigurationError, NumericalError
from src.sdnet import COMPONENTS, ForwardResult

CCM_REDUCTIONS = ("mean", "sum")
NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """
    Loss hyperparameters.

    Attributes:
        alpha (float): Weight of the boundary BCE term
        beta (float): Weight of the boundary Dice term
        tau (float): Dice smooth term
        ccm_reduction (str): 'mean' or 'sum' over embedding pixels
        ccm_clamp (bool): Penalize max(0, cos) instead of the raw cosine
        ccm_stop_gradient (bool): Stop contrastive gradients at the shared features
    """

    alpha: float = 0.1
    beta: float = 1.0
    tau: float = 1.0
    ccm_reduction: str = "mean"
    ccm_clamp: bool = False
    ccm_stop_gradient: bool = False

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if self.ccm_reduction not in CCM_REDUCTIONS:
            raise ConfigurationError(f"ccm_reduction must be one of {CCM_REDUCTIONS}")


@dataclass
class LossBreakdown:
    """
    Loss terms of one step. Disabled terms are zero.

    ``seg_joint`` is the 3-class cross-entropy of the UNet baseline and is zero
    whenever semantic decomposition is enabled.
    """

    seg_teeth: torch.Tensor
    seg_plaque: torch.Tensor
    scm_teeth: torch.Tensor
    scm_plaque: torch.Tensor
    ccm: torch.Tensor
    seg_joint: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return (
            self.seg_teeth + self.seg_plaque + self.scm_teeth
            + self.scm_plaque + self.ccm + self.seg_joint
        )

    def terms(self) -> Dict[str, torch.Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def as_dict(self) -> Dict[str, float]:
        values = {name: float(value.detach()) for name, value in self.terms().items()}
        values["total"] = float(self.total.detach())
        return values


def _check_finite(tensor: torch.Tensor, name: str) -> None:
    if not torch.isfinite(tensor).all():
        raise NumericalError(f"Non-finite values in {name}", term=name)


def seg_ce_loss(mask_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Pixel-mean categorical cross-entropy of a 2-class mask head.

    Args:
        mask_logits (torch.Tensor): [2, H, W] or [N, 2, H, W]
        target (torch.Tensor): Binary map [H, W] or [N, H, W]

    Returns:
        torch.Tensor: Scalar loss

    Raises:
        NumericalError: If the logits are not finite
    """
    _check_finite(mask_logits, "mask_logits")
    if mask_logits.dim() == 3:
        mask_logits, target = mask_logits.unsqueeze(0), target.unsqueeze(0)
    return F.cross_entropy(mask_logits, target.long())


def joint_ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Pixel-mean 3-class cross-entropy of the baseline head."""
    _check_finite(logits, "joint_logits")
    if logits.dim() == 3:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    return F.cross_entropy(logits, labels.long())


def dice_loss(probabilities: torch.Tensor, target: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """
    Soft Dice loss with squared denominators.

        1 - (2 * sum(p * y) + tau) / (sum(p^2) + sum(y^2) + tau)

    Args:
        probabilities (torch.Tensor): [H, W] or [N, H, W] in [0, 1]
        target (torch.Tensor): Binary map of the same shape
        tau (float): Smooth term

    Returns:
        torch.Tensor: Batch mean of the per-sample loss
    """
    if probabilities.dim() == 2:
        probabilities, target = probabilities.unsqueeze(0), target.unsqueeze(0)
    target = target.to(probabilities.dtype)
    p = probabilities.flatten(1)
    y = target.flatten(1)
    numerator = 2.0 * (p * y).sum(dim=1) + tau
    denominator = (p * p).sum(dim=1) + (y * y).sum(dim=1) + tau
    return (1.0 - numerator / denominator).mean()


def bce_loss(boundary_logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """
    Pixel-mean binary cross-entropy on logits (log-sum-exp form).

    Args:
        boundary_logits (torch.Tensor): [1, H, W] or [N, 1, H, W]
        target (torch.Tensor): Binary map [H, W] or [N, H, W]
    """
    logits = boundary_logits.squeeze(-3)
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def scm_loss(boundary_logits: torch.Tensor, boundary_target: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    """
    Compound boundary loss: alpha * BCE + beta * Dice(sigmoid(logits)).
    """
    _check_finite(boundary_logits, "boundary_logits")
    probabilities = torch.sigmoid(boundary_logits).squeeze(-3)
    return (
        weights.alpha * bce_loss(boundary_logits, boundary_target)
        + weights.beta * dice_loss(probabilities, boundary_target, weights.tau)
    )


def ccm_loss(
    emb_plaque: torch.Tensor,
    emb_teeth: torch.Tensor,
    reduction: str = "mean",
    clamp: bool = False,
) -> torch.Tensor:
    """
    Cosine similarity between plaque and teeth embeddings at each pixel.

    Each vector is divided by its L2 norm plus 1e-12, so zero vectors give zero
    similarity instead of a division by zero.

    Args:
        emb_plaque (torch.Tensor): [w*h, d] or [N, w*h, d]
        emb_teeth (torch.Tensor): Same shape
        reduction (str): 'mean' or 'sum' over pixels
        clamp (bool): Use max(0, cos)

    Returns:
        torch.Tensor: Batch mean of the reduced similarity
    """
    if emb_plaque.shape != emb_teeth.shape:
        raise ValueError(f"Embedding shapes differ: {tuple(emb_plaque.shape)} vs {tuple(emb_teeth.shape)}")
    if reduction not in CCM_REDUCTIONS:
        raise ConfigurationError(f"ccm_reduction must be one of {CCM_REDUCTIONS}")
    if emb_plaque.dim() == 2:
        emb_plaque, emb_teeth = emb_plaque.unsqueeze(0), emb_teeth.unsqueeze(0)

    unit_p = emb_plaque / (emb_plaque.norm(dim=-1, keepdim=True) + NORM_EPS)
    unit_t = emb_teeth / (emb_teeth.norm(dim=-1, keepdim=True) + NORM_EPS)
    cosine = (unit_p * unit_t).sum(dim=-1)
    if clamp:
        cosine = cosine.clamp(min=0.0)

    per_sample = cosine.sum(dim=1) if reduction == "sum" else cosine.mean(dim=1)
    return per_sample.mean()


def total_loss(
    forward: ForwardResult,
    targets: Mapping[str, torch.Tensor],
    weights: LossWeights,
    components: AbstractSet[str] = COMPONENTS,
) -> LossBreakdown:
    """
    Assemble the loss breakdown of a forward pass.

    Plaque outputs pair with Y_p / Y_p^e and teeth outputs with Y_t / Y_t^e.
    Components missing from ``components`` contribute exact zeros.

    Args:
        forward (ForwardResult): Model outputs
        targets (Mapping): Batched supervision with keys labels, teeth_mask,
            plaque_mask, teeth_boundary, plaque_boundary
        weights (LossWeights): Loss hyperparameters
        components (AbstractSet[str]): Enabled components among SD, CCM, SCM

    Returns:
        LossBreakdown: Individual terms; ``total`` is their sum

    Raises:
        NumericalError: Naming the first non-finite term
    """
    reference = forward.bottleneck if forward.bottleneck is not None else forward.joint_logits
    zero = reference.new_zeros(())
    terms = dict(seg_teeth=zero, seg_plaque=zero, scm_teeth=zero, scm_plaque=zero, ccm=zero, seg_joint=zero)

    if not forward.decomposed:
        terms["seg_joint"] = joint_ce_loss(forward.joint_logits, targets["labels"])
    else:
        terms["seg_teeth"] = seg_ce_loss(forward.teeth.mask_logits, targets["teeth_mask"])
        terms["seg_plaque"] = seg_ce_loss(forward.plaque.mask_logits, targets["plaque_mask"])

        if "SCM" in components:
            terms["scm_teeth"] = scm_loss(forward.teeth.boundary_logits, targets["teeth_boundary"], weights)
            terms["scm_plaque"] = scm_loss(forward.plaque.boundary_logits, targets["plaque_boundary"], weights)

        if "CCM" in components:
            terms["ccm"] = ccm_loss(
                forward.plaque.embeddings,
                forward.teeth.embeddings,
                reduction=weights.ccm_reduction,
                clamp=weights.ccm_clamp,
            )

    for name, value in terms.items():
        if not math.isfinite(float(value.detach())):
            raise NumericalError(f"Loss term '{name}' is not finite: {float(value.detach())}", term=name)

    return LossBreakdown(**terms)
