"""Dual-task objective: class-weighted segmentation CE plus boundary BCE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .core import NumericError, ShapeError, TrainConfig

# Floor on log arguments; below float32 resolution of meaningful probabilities.
EPS = 1e-12


def _weight_vector(weights, device, dtype) -> torch.Tensor:
    if weights is None:
        raise ValueError("class weights are required for weighted modes")
    vec = getattr(weights, "normalized", weights)
    return torch.as_tensor(np.asarray(vec), device=device, dtype=dtype)


def _check_probs(probs: torch.Tensor) -> None:
    if torch.isnan(probs).any():
        raise NumericError("NaN in predicted class probabilities")


def weighted_cross_entropy(
    probs: torch.Tensor,
    labels: torch.Tensor,
    weights=None,
    mode: str = "per_pixel",
    reduction: str = "mean",
) -> torch.Tensor:
    """Cross-entropy over softmax probabilities with inverse-frequency weights.

    ``per_pixel`` scales each pixel's term by its true-class weight.
    ``per_image`` scales each image's summed CE by that image's total label
    weight (the literal weighted-sum formulation). ``none`` is plain CE.
    ``reduction`` 'mean' divides by the pixel count, 'sum' keeps raw sums.
    """
    if probs.dim() == 3:
        probs = probs.unsqueeze(0)
    if labels.dim() == 2:
        labels = labels.unsqueeze(0)
    if probs.shape[0] != labels.shape[0] or probs.shape[-2:] != labels.shape[-2:]:
        raise ShapeError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} mismatch")
    _check_probs(probs)
    labels = labels.long()

    neg_log = -torch.log(probs.clamp_min(EPS))
    picked = neg_log.gather(1, labels.unsqueeze(1)).squeeze(1)  # (B, H, W)

    if mode == "none":
        total = picked.sum()
    elif mode == "per_pixel":
        w = _weight_vector(weights, probs.device, probs.dtype)
        total = (w[labels] * picked).sum()
    elif mode == "per_image":
        w = _weight_vector(weights, probs.device, probs.dtype)
        per_image_ce = picked.sum(dim=(1, 2))
        per_image_weight = w[labels].sum(dim=(1, 2))
        total = (per_image_weight * per_image_ce).sum()
    else:
        raise ValueError(f"unknown weighting mode {mode!r}")

    if reduction == "mean":
        return total / labels.numel()
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


def boundary_bce(
    pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean"
) -> torch.Tensor:
    """Binary cross-entropy between a boundary probability map and a 0/1 target."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {tuple(pred.shape)} and target {tuple(target.shape)} mismatch")
    if torch.isnan(pred).any():
        raise NumericError("NaN in boundary predictions")
    target = target.to(pred.dtype)
    if not torch.logical_or(target == 0, target == 1).all():
        raise ValueError("boundary target must be binary (0/1)")
    term = -(
        target * torch.log(pred.clamp_min(EPS))
        + (1 - target) * torch.log((1 - pred).clamp_min(EPS))
    )
    if reduction == "mean":
        return term.mean()
    if reduction == "sum":
        return term.sum()
    raise ValueError(f"unknown reduction {reduction!r}")


@dataclass
class LossReport:
    """Scalar loss components; total = lambda_seg*seg + lambda_boundary*boundary."""

    total: torch.Tensor
    seg: torch.Tensor
    boundary: torch.Tensor
    lambda_seg: float
    lambda_boundary: float

    def as_floats(self) -> tuple[float, float, float]:
        return float(self.total), float(self.seg), float(self.boundary)


def dual_task_loss(
    output,
    labels: torch.Tensor,
    boundary_target: torch.Tensor | None,
    weights,
    cfg: TrainConfig,
    weighting_mode: str | None = None,
) -> LossReport:
    """Combine the weighted segmentation CE and the boundary BCE.

    ``output`` is a NetworkOutput; when its boundary map is absent (boundary
    stream ablated) the boundary component is zero.
    """
    mode = cfg.weighting_mode if weighting_mode is None else weighting_mode
    seg = weighted_cross_entropy(
        output.seg_probs, labels, weights=weights, mode=mode, reduction=cfg.reduction
    )
    if output.boundary_prob is not None:
        if boundary_target is None:
            raise ValueError("boundary target required when the boundary stream is active")
        bnd = boundary_bce(output.boundary_prob, boundary_target, reduction=cfg.reduction)
    else:
        bnd = torch.zeros((), device=seg.device, dtype=seg.dtype)
    total = cfg.lambda_seg * seg + cfg.lambda_boundary * bnd
    return LossReport(
        total=total,
        seg=seg,
        boundary=bnd,
        lambda_seg=cfg.lambda_seg,
        lambda_boundary=cfg.lambda_boundary,
    )
