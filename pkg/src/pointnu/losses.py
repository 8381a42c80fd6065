"""Training objectives: penalty-reduced focal keypoint loss, soft Dice mask loss, total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .segmentor import dynamic_mask_logits, gather_kernels, standard_mask_logits

CLAMP = 1e-6
DETECTOR_LOSSES = ("focal", "bce")


@dataclass
class LossBreakdown:
    total: torch.Tensor
    keypoint_loss: float
    mask_loss: float
    n_pos_k: int
    n_pos_m: int

    def as_dict(self) -> dict:
        return {"total": float(self.total), "keypoint": self.keypoint_loss, "mask": self.mask_loss,
                "n_pos_k": self.n_pos_k, "n_pos_m": self.n_pos_m}


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: prediction {tuple(a.shape)} vs target {tuple(b.shape)}")


def focal_keypoint_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0):
    """Penalty-reduced focal loss, normalised by the number of exact-1 target cells (at least 1)."""
    _check_shapes(pred, target)
    p = pred.clamp(CLAMP, 1 - CLAMP)
    pos = target == 1
    pos_term = (1 - p) ** alpha * torch.log(p)
    neg_term = (1 - target) ** beta * p ** alpha * torch.log(1 - p)
    n_pos = max(int(pos.sum()), 1)
    return -torch.where(pos, pos_term, neg_term).sum() / n_pos


def bce_keypoint_loss(pred: torch.Tensor, target: torch.Tensor):
    """Plain binary cross-entropy on the same target, with the focal loss's normaliser."""
    _check_shapes(pred, target)
    p = pred.clamp(CLAMP, 1 - CLAMP)
    n_pos = max(int((target == 1).sum()), 1)
    return F.binary_cross_entropy(p, target.to(p.dtype), reduction="sum") / n_pos


def soft_dice_loss(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """``1 - 2 sum(p g) / (sum p^2 + sum g^2 + eps)`` over the last two axes."""
    _check_shapes(pred, gt)
    gt = gt.to(pred.dtype)
    inter = (pred * gt).sum(dim=(-2, -1))
    denom = (pred * pred).sum(dim=(-2, -1)) + (gt * gt).sum(dim=(-2, -1)) + eps
    return 1 - 2 * inter / denom


def mask_loss(features, kernels, positives, instance_map, mask_stack=None):
    """Mean Dice loss over positives ``(x, y, c, k)`` of one image.

    ``features`` is ``(E, H, W)``; ``kernels`` is ``(E, h, w)`` for the dynamic
    segmentor, or ``None`` with a static ``mask_stack`` for the standard one.
    Returns ``(summed loss, number of positive terms)``.
    """
    if not positives:
        return features.sum() * 0.0, 0
    cells = [(x, y) for x, y, _, _ in positives]
    if mask_stack is None:
        logits = dynamic_mask_logits(features, gather_kernels(kernels, cells))
    else:
        logits = standard_mask_logits(mask_stack, cells, features.shape[-2:])
    inst = torch.as_tensor(np.asarray(instance_map), dtype=torch.long)
    ks = torch.as_tensor([k for _, _, _, k in positives], dtype=torch.long)
    gt = (inst[None] == ks[:, None, None])
    per = soft_dice_loss(torch.sigmoid(logits), gt)
    return per.sum(), len(positives)


def total_loss(outputs, targets, annotations, lambda_mask: float = 1.0, detector_loss: str = "focal",
               alpha: float = 2.0, beta: float = 4.0) -> LossBreakdown:
    """Keypoint loss over the batch plus ``lambda_mask`` times the per-positive mean mask loss.

    *outputs* is a :class:`~pointnu.model.NetworkOutput` for a batch; *targets*
    and *annotations* are per-image lists.
    """
    if detector_loss not in DETECTOR_LOSSES:
        raise ValueError(f"unknown detector loss {detector_loss!r}")
    pred = outputs.heatmap
    Y = torch.as_tensor(np.stack([t.Y for t in targets]), dtype=pred.dtype)
    if detector_loss == "focal":
        kp = focal_keypoint_loss(pred, Y, alpha, beta)
    else:
        kp = bce_keypoint_loss(pred, Y)
    n_pos_k = int((Y == 1).sum())

    acc = pred.sum() * 0.0
    n_pos_m = 0
    for i, (t, ann) in enumerate(zip(targets, annotations)):
        kernels = outputs.kernels[i] if outputs.kernels is not None else None
        stack = outputs.mask_stack[i] if outputs.mask_stack is not None else None
        s, n = mask_loss(outputs.features[i], kernels, t.positives, ann.instance_map, stack)
        acc = acc + s
        n_pos_m += n
    mloss = acc / n_pos_m if n_pos_m else acc
    total = kp + lambda_mask * mloss
    return LossBreakdown(total, float(kp.detach()), float(mloss.detach()), n_pos_k, n_pos_m)
