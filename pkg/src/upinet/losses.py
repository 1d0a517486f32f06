"""Class-balanced cross-entropy on contour logits and the summed
multi-output objective; sigmoid prediction."""

from __future__ import annotations

import warnings

import torch
import torch.nn.functional as F
from torch import Tensor


def class_balance_weight(mask: Tensor) -> float:
    """Negative-to-positive pixel ratio of a binary mask.

    Returns 0 for an all-positive mask (the formula's numerator is 0) and
    0 with a warning for a mask without positives, where the ratio is
    undefined; such slices still train on the negative term alone.
    """
    pos = int((mask > 0.5).sum())
    neg = int(mask.numel()) - pos
    if pos == 0:
        if neg > 0:
            warnings.warn("mask has no positive pixels; balance weight set to 0", stacklevel=2)
        return 0.0
    return neg / pos


def balanced_bce(logits: Tensor, masks: Tensor, weight: float | None = None) -> Tensor:
    """Class-balanced binary cross-entropy, averaged over the batch.

    ``logits`` is B x 1 x H x W pre-activation output, ``masks`` B x H x W
    (or B x 1 x H x W) binary. Per image the positive log-likelihood term
    is scaled by the negative/positive ratio (or ``weight`` if given) and
    the sum is divided by the pixel count. Evaluated in logit form via
    softplus, so saturated sigmoids never reach a log.
    """
    if logits.dim() != 4 or logits.shape[1] != 1:
        raise ValueError(f"expected B x 1 x H x W logits, got {tuple(logits.shape)}")
    if masks.dim() == 4:
        masks = masks[:, 0]
    if masks.shape != (logits.shape[0], logits.shape[2], logits.shape[3]):
        raise ValueError(f"mask shape {tuple(masks.shape)} does not match logits {tuple(logits.shape)}")
    flat = logits[:, 0]
    pos = masks > 0.5
    total = torch.zeros((), dtype=logits.dtype, device=logits.device)
    for i in range(flat.shape[0]):
        w = class_balance_weight(masks[i]) if weight is None else weight
        o = flat[i]
        p = pos[i]
        n = o.numel()
        # -log sigmoid(o) = softplus(-o); -log(1 - sigmoid(o)) = softplus(o)
        loss_pos = F.softplus(-o[p]).sum() * w
        loss_neg = F.softplus(o[~p]).sum()
        total = total + (loss_pos + loss_neg) / n
    return total / flat.shape[0]


def total_loss(outputs, masks: Tensor, weight: float | None = None):
    """Sum of balanced cross-entropies over every named output map.

    ``outputs`` is anything with ``.items()`` yielding (name, logits)
    pairs, such as a ``ModelOutputs``. Returns (total, per-output dict).
    """
    breakdown: dict[str, Tensor] = {}
    total = None
    for name, logits in outputs.items():
        term = balanced_bce(logits, masks, weight=weight)
        breakdown[name] = term
        total = term if total is None else total + term
    if total is None:
        raise ValueError("outputs yielded no maps")
    return total, breakdown


def predict(fused_logits: Tensor) -> Tensor:
    """Elementwise sigmoid of the fused output map."""
    return torch.sigmoid(fused_logits)
