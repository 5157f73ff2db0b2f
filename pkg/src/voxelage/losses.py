"""Multi-task loss: soft Dice + global MAE + voxel MAE with adaptive weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .volume import ValidationError

DICE_EPS = 1e-6
TISSUE_CLASSES = (1, 2, 3)
WEIGHT_CAP = 100.0
EMA_DECAY = 0.9


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # segmentation
    beta: float = 1.0  # global age
    gamma: float = 1.0  # voxel age

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValidationError(f"loss weight {name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBreakdown:
    dice_loss: float
    mae_global: float
    mae_voxel: float
    weights: LossWeights
    total: float

    def as_row(self) -> dict:
        return {
            "dice_loss": self.dice_loss,
            "mae_global": self.mae_global,
            "mae_voxel": self.mae_voxel,
            "alpha": self.weights.alpha,
            "beta": self.weights.beta,
            "gamma": self.weights.gamma,
            "total": self.total,
        }


def _t(x, dtype=None):
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def soft_dice_loss(pred_probs, target_labels, classes=TISSUE_CLASSES, eps: float = DICE_EPS, batched=None):
    """``1 - mean_c 2*sum(p*g) / (sum(p^2) + sum(g^2) + eps)`` over tissue classes.

    ``pred_probs`` is ``(C, ...)`` with labels ``(...)``, or batched
    ``(B, C, ...)`` with labels ``(B, ...)``; a batch is pooled into one
    volume.  Pass ``batched`` explicitly when the layout is ambiguous.
    Returns a tensor when given tensors, otherwise a float.
    """
    as_float = not isinstance(pred_probs, torch.Tensor)
    p = _t(pred_probs)
    g = _t(target_labels)
    if batched is None:
        batched = p.shape[1:] != g.shape
    if not batched:
        p, g = p.unsqueeze(0), g.unsqueeze(0)
    if p.dim() != g.dim() + 1 or p.shape[0] != g.shape[0] or p.shape[2:] != g.shape[1:]:
        raise ValidationError(f"pred {tuple(p.shape)} and target {tuple(g.shape)} shapes do not match")
    g = g.to(torch.long)
    scores = []
    for c in classes:
        pc = p[:, c]
        gc = (g == c).to(p.dtype)
        num = 2.0 * (pc * gc).sum()
        den = (pc * pc).sum() + (gc * gc).sum() + eps
        scores.append(num / den)
    loss = 1.0 - torch.stack(scores).mean()
    return float(loss) if as_float else loss


def mae_global(pred_age, true_age):
    """Mean absolute error between scalar (or batched scalar) ages."""
    as_float = not isinstance(pred_age, torch.Tensor)
    p = _t(pred_age)
    t = _t(true_age, p.dtype)
    loss = (p - t).abs().mean()
    return float(loss) if as_float else loss


def mse_global(pred_age, true_age):
    as_float = not isinstance(pred_age, torch.Tensor)
    p = _t(pred_age)
    t = _t(true_age, p.dtype)
    loss = ((p - t) ** 2).mean()
    return float(loss) if as_float else loss


def mae_voxel(pred_map, target_map, brain_mask):
    """Mean of ``|pred - target|`` over voxels where ``brain_mask`` is set."""
    as_float = not isinstance(pred_map, torch.Tensor)
    p = _t(pred_map)
    t = _t(target_map, p.dtype)
    m = _t(brain_mask) > 0
    if p.shape != t.shape or p.shape != m.shape:
        raise ValidationError(f"shape mismatch: pred {tuple(p.shape)}, target {tuple(t.shape)}, mask {tuple(m.shape)}")
    n = m.sum()
    if n == 0:
        raise ValidationError("empty brain mask")
    loss = torch.where(m, (p - t).abs(), torch.zeros_like(p)).sum() / n
    return float(loss) if as_float else loss


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def weighted_total(dice_loss, mae_g, mae_v, weights: LossWeights):
    # fixed evaluation order: logs are recombined with this same function
    return weights.alpha * dice_loss + weights.beta * mae_g + weights.gamma * mae_v


def combined_loss(dice_loss, mae_g, mae_v, weights: LossWeights = LossWeights()):
    """Weighted sum of the three task losses.

    Returns ``(total, breakdown)``; ``total`` keeps the autograd graph when the
    terms are tensors, the weights are plain constants.
    """
    total = weighted_total(dice_loss, mae_g, mae_v, weights)
    breakdown = LossBreakdown(
        dice_loss=_scalar(dice_loss),
        mae_global=_scalar(mae_g),
        mae_voxel=_scalar(mae_v),
        weights=weights,
        total=_scalar(total),
    )
    return total, breakdown


def update_task_weights(ema_losses, epsilon: float = 1e-12, cap: float = WEIGHT_CAP) -> LossWeights:
    """Inverse-magnitude weights giving each task the same weighted loss.

    ``w_i = (L1 + L2 + L3) / (3 * L_i + epsilon)``, capped at ``cap``.
    """
    ema = np.asarray(ema_losses, dtype=np.float64)
    if ema.shape != (3,) or np.any(ema < 0) or not np.all(np.isfinite(ema)):
        raise ValidationError(f"need three finite nonnegative loss averages, got {ema_losses}")
    if epsilon <= 0:
        raise ValidationError("epsilon must be > 0")
    w = ema.sum() / (3.0 * ema + epsilon)
    w = np.minimum(w, cap)
    return LossWeights(float(w[0]), float(w[1]), float(w[2]))


class TaskWeightTracker:
    """Per-batch EMAs of the three losses; weights refresh on demand (per epoch)."""

    def __init__(self, decay: float = EMA_DECAY, epsilon: float = 1e-12, cap: float = WEIGHT_CAP):
        self.decay = decay
        self.epsilon = epsilon
        self.cap = cap
        self.ema = None
        self.weights = LossWeights()

    def observe(self, dice_loss: float, mae_g: float, mae_v: float) -> None:
        x = np.array([dice_loss, mae_g, mae_v], dtype=np.float64)
        if self.ema is None:
            self.ema = x
        else:
            self.ema = self.decay * self.ema + (1.0 - self.decay) * x

    def refresh(self) -> LossWeights:
        if self.ema is not None:
            self.weights = update_task_weights(self.ema, self.epsilon, self.cap)
        return self.weights
