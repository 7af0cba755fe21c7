"""Segmentation objectives: soft Dice, DiceCE, focal, and the distance-transform boundary term.

Shapes: ``logits`` (B, C, H, W, D) with C including background, ``gt`` (B, H, W, D)
integer labels in [0, C).

The boundary term is computed over foreground classes only. It comes in two modes:

``literal``
    D_i = normalised |SDT| of the hard (argmax) prediction for class i, S_i = the
    ground-truth surface of class i; term = sum_i sum_x D_i S_i / sum_i sum_x D_i.
    Piecewise constant in the parameters, so it is reported but carries no gradient.
``differentiable``
    D_i = normalised |SDT| of the ground truth for class i (a constant weight map);
    term = sum_i sum_x D_i |p_i - g_i| / sum_i sum_x D_i with p the softmax.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .distance import normalized_abs_sdt, surface_indicator

VARIANTS = ("dice", "focal", "dice_ce", "dice_ce_dist")
MODES = ("literal", "differentiable")


@dataclass
class LossConfig:
    lam: float = 1.0
    mode: str = "differentiable"
    variant: str = "dice_ce_dist"
    gamma: float = 2.0
    eps: float = 1.0

    def validate(self) -> None:
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")


def _prep(logits: torch.Tensor, gt) -> tuple[torch.Tensor, torch.Tensor]:
    gt = torch.as_tensor(np.asarray(gt) if not torch.is_tensor(gt) else gt).long().to(logits.device)
    if logits.dim() == 4:
        logits = logits.unsqueeze(0)
    if gt.dim() == 3:
        gt = gt.unsqueeze(0)
    if logits.shape[0] != gt.shape[0] or logits.shape[2:] != gt.shape[1:]:
        raise ValueError(f"logits {tuple(logits.shape)} do not match labels {tuple(gt.shape)}")
    if gt.numel() and (gt.min() < 0 or gt.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return logits, gt


def _one_hot(gt: torch.Tensor, num_classes: int, dtype) -> torch.Tensor:
    return F.one_hot(gt, num_classes).permute(0, 4, 1, 2, 3).to(dtype)


def dice_per_class(probs: torch.Tensor, onehot: torch.Tensor, eps: float) -> torch.Tensor:
    """Soft Dice coefficient per (sample, class).

    ``eps`` smooths numerator and denominator alike, so a class that is absent and
    predicted absent scores 1 rather than 0.
    """
    dims = (2, 3, 4)
    inter = (probs * onehot).sum(dims)
    denom = probs.sum(dims) + onehot.sum(dims)
    return (2 * inter + eps) / (denom + eps)


def soft_dice_loss(logits, gt, eps: float = 1.0) -> torch.Tensor:
    logits, gt = _prep(logits, gt)
    probs = logits.softmax(1)
    return (1 - dice_per_class(probs, _one_hot(gt, logits.shape[1], probs.dtype), eps)).mean()


def dice_ce(logits, gt, eps: float = 1.0) -> torch.Tensor:
    logits, gt = _prep(logits, gt)
    return soft_dice_loss(logits, gt, eps) + F.cross_entropy(logits, gt)


def focal_dice(logits, gt, gamma: float = 2.0, eps: float = 1.0) -> torch.Tensor:
    """Focal CE, mean (1 - p_t)^gamma * CE, plus focal Dice, mean_c (1 - DSC_c)^(1/gamma)."""
    logits, gt = _prep(logits, gt)
    logp = logits.log_softmax(1)
    logp_t = logp.gather(1, gt.unsqueeze(1)).squeeze(1)
    p_t = logp_t.exp()
    focal_ce = ((1 - p_t) ** gamma * -logp_t).mean()
    probs = logp.exp()
    dsc = dice_per_class(probs, _one_hot(gt, logits.shape[1], probs.dtype), eps)
    focal_d = (1 - dsc).clamp_min(1e-12) ** (1.0 / gamma)
    return focal_ce + focal_d.mean()


def _distance_fields(labels: np.ndarray, num_classes: int) -> list[tuple[int, np.ndarray]]:
    out = []
    for i in range(1, num_classes):
        d = normalized_abs_sdt(labels == i)
        if d is not None:
            out.append((i, d))
    return out


def dist_loss_term(pred, gt, mode: str = "differentiable", num_classes: int | None = None) -> torch.Tensor:
    """Boundary term; ``pred`` is logits (B, C, ...) or hard labels (B, ...).

    Hard labels are argmax-free in literal mode and one-hot probabilities in
    differentiable mode, so ``pred == gt`` gives exactly 0 in both.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    pred_is_labels = not torch.is_tensor(pred) or pred.is_floating_point() is False
    if mode == "literal":
        if pred_is_labels:
            pred_lab = np.asarray(pred.cpu() if torch.is_tensor(pred) else pred)
            if pred_lab.ndim == 3:
                pred_lab = pred_lab[None]
            gt_np = np.asarray(gt.cpu() if torch.is_tensor(gt) else gt)
            if gt_np.ndim == 3:
                gt_np = gt_np[None]
            if pred_lab.shape != gt_np.shape:
                raise ValueError(f"prediction {pred_lab.shape} does not match labels {gt_np.shape}")
            c = num_classes or int(max(pred_lab.max(), gt_np.max())) + 1
            dtype = torch.float64
        else:
            logits, gt_t = _prep(pred, gt)
            pred_lab = logits.detach().argmax(1).cpu().numpy()
            gt_np = gt_t.cpu().numpy()
            c = logits.shape[1]
            dtype = logits.dtype
        num = den = 0.0
        for b in range(gt_np.shape[0]):
            for i, d in _distance_fields(pred_lab[b], c):
                num += float((d * surface_indicator(gt_np[b], i)).sum())
                den += float(d.sum())
        return torch.tensor(num / den if den > 0 else 0.0, dtype=dtype)

    if pred_is_labels:
        # hard labels act as one-hot probabilities
        lab = torch.as_tensor(np.asarray(pred.cpu() if torch.is_tensor(pred) else pred)).long()
        if lab.dim() == 3:
            lab = lab[None]
        c = num_classes or int(max(int(lab.max()), int(np.asarray(gt).max()))) + 1
        pred = _one_hot(lab, c, torch.float64)
        logits, gt_t = _prep(pred, gt)
        probs = logits
    else:
        logits, gt_t = _prep(pred, gt)
        probs = logits.softmax(1)
    gt_np = gt_t.cpu().numpy()
    num = logits.new_zeros(())
    den = 0.0
    for b in range(gt_np.shape[0]):
        for i, d in _distance_fields(gt_np[b], logits.shape[1]):
            w = torch.as_tensor(d, dtype=logits.dtype, device=logits.device)
            g = torch.as_tensor(gt_np[b] == i, dtype=logits.dtype, device=logits.device)
            num = num + (w * (probs[b, i] - g).abs()).sum()
            den += float(d.sum())
    if den <= 0:
        return logits.new_zeros(())
    return num / den


def base_loss(logits, gt, cfg: LossConfig) -> torch.Tensor:
    if cfg.variant == "dice":
        return soft_dice_loss(logits, gt, cfg.eps)
    if cfg.variant == "focal":
        return focal_dice(logits, gt, cfg.gamma, cfg.eps)
    return dice_ce(logits, gt, cfg.eps)


def loss_terms(logits, gt, cfg: LossConfig) -> dict[str, torch.Tensor]:
    """Base loss, boundary term and their λ-weighted total."""
    cfg.validate()
    base = base_loss(logits, gt, cfg)
    terms = {"base": base}
    if cfg.variant == "dice_ce_dist":
        dist = dist_loss_term(logits, gt, cfg.mode)
        terms["dist"] = dist
        terms["total"] = base + cfg.lam * dist if cfg.lam != 0 else base
    else:
        terms["total"] = base
    return terms


def total_loss(logits, gt, cfg: LossConfig) -> torch.Tensor:
    return loss_terms(logits, gt, cfg)["total"]
