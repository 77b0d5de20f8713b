"""Segmentation losses with closed-form gradients w.r.t. predicted probabilities.

Soft Dice, binary cross-entropy, their convex combination, the wall-weighted
scar loss (two weighting modes), and the stage-II dual-task composite. All
reductions use a fixed summation order so repeated evaluations are
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from progseg.volume import Volume

MODE_LITERAL = "literal-eq8"
MODE_NORMALIZED = "per-voxel-normalized"


@dataclass(frozen=True)
class LossConfig:
    dice_weight: float = 0.5  # trade-off between Dice and CE terms
    epsilon: float = 1e-5
    clamp: float = 1e-7
    weight_mode: str = MODE_NORMALIZED

    def __post_init__(self):
        if not 0.0 <= self.dice_weight <= 1.0:
            raise ValueError(f"dice_weight must be in [0, 1], got {self.dice_weight}")
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if self.weight_mode not in (MODE_LITERAL, MODE_NORMALIZED):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")


@dataclass(frozen=True)
class LossReport:
    """Scalar loss value plus the per-voxel gradient d value / d pred."""

    value: float
    grad: np.ndarray


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)


def _check_grids(*arrays: np.ndarray):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"grid mismatch: {a.shape} vs {shape}")


def dice_loss(pred, gt, eps: float = 1e-5) -> LossReport:
    """Soft Dice loss 1 - (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps)."""
    p, y = _arr(pred), _arr(gt)
    _check_grids(p, y)
    a = 2.0 * np.sum(p * y) + eps
    b = np.sum(p) + np.sum(y) + eps
    grad = -(2.0 * y * b - a) / (b * b)
    return LossReport(float(1.0 - a / b), grad)


def ce_loss(pred, gt, clamp: float = 1e-7) -> LossReport:
    """Mean binary cross-entropy with predictions clamped to [clamp, 1-clamp].

    Gradient is zero where the clamp is active.
    """
    p, y = _arr(pred), _arr(gt)
    _check_grids(p, y)
    n = p.size
    pc = np.clip(p, clamp, 1.0 - clamp)
    value = -np.sum(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)) / n
    inside = (p > clamp) & (p < 1.0 - clamp)
    grad = np.where(inside, -(y / pc - (1.0 - y) / (1.0 - pc)) / n, 0.0)
    return LossReport(float(value), grad)


def dice_ce_loss(pred, gt, cfg: LossConfig = LossConfig()) -> LossReport:
    """Convex combination of Dice and CE: lam * Dice + (1 - lam) * CE."""
    d = dice_loss(pred, gt, cfg.epsilon)
    c = ce_loss(pred, gt, cfg.clamp)
    lam = cfg.dice_weight
    return LossReport(
        lam * d.value + (1.0 - lam) * c.value,
        lam * d.grad + (1.0 - lam) * c.grad,
    )


def _weighted_normalized(p, y, w, cfg: LossConfig) -> LossReport:
    # Dice with raw per-voxel weights inside every sum; the smoothing term is
    # scaled by the mean weight so a spatially constant map cancels exactly.
    eps = cfg.epsilon * np.mean(w)
    a = 2.0 * np.sum(w * p * y) + eps
    b = np.sum(w * p) + np.sum(w * y) + eps
    dice_val = 1.0 - a / b
    dice_grad = -(2.0 * w * y * b - a * w) / (b * b)
    # CE: weighted mean over voxels (total weight in the denominator).
    clamp = cfg.clamp
    sw = np.sum(w)
    pc = np.clip(p, clamp, 1.0 - clamp)
    ce_val = -np.sum(w * (y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))) / sw
    inside = (p > clamp) & (p < 1.0 - clamp)
    ce_grad = np.where(inside, -w * (y / pc - (1.0 - y) / (1.0 - pc)) / sw, 0.0)
    lam = cfg.dice_weight
    return LossReport(
        float(lam * dice_val + (1.0 - lam) * ce_val),
        lam * dice_grad + (1.0 - lam) * ce_grad,
    )


def _weighted_literal(p, y, w, cfg: LossConfig) -> LossReport:
    # DiceCE evaluated on the elementwise-scaled pair (w*p, w*y); CE inputs
    # are clamped back into [clamp, 1-clamp] after scaling.
    ps, ys = w * p, w * y
    a = 2.0 * np.sum(ps * ys) + cfg.epsilon
    b = np.sum(ps) + np.sum(ys) + cfg.epsilon
    dice_val = 1.0 - a / b
    dice_grad = w * (-(2.0 * ys * b - a) / (b * b))
    clamp = cfg.clamp
    n = p.size
    pc = np.clip(ps, clamp, 1.0 - clamp)
    ce_val = -np.sum(ys * np.log(pc) + (1.0 - ys) * np.log(1.0 - pc)) / n
    inside = (ps > clamp) & (ps < 1.0 - clamp)
    ce_grad = np.where(inside, -w * (ys / pc - (1.0 - ys) / (1.0 - pc)) / n, 0.0)
    lam = cfg.dice_weight
    return LossReport(
        float(lam * dice_val + (1.0 - lam) * ce_val),
        lam * dice_grad + (1.0 - lam) * ce_grad,
    )


def weighted_scar_loss(pred, gt, weights, cfg: LossConfig = LossConfig()) -> LossReport:
    """Spatially weighted DiceCE for the scar task.

    "per-voxel-normalized" (default) treats the weight map as per-voxel loss
    weights inside both terms, so any spatially constant map reduces to plain
    DiceCE. "literal-eq8" scales prediction and ground truth by the map before
    the loss.
    """
    p, y, w = _arr(pred), _arr(gt), _arr(weights)
    _check_grids(p, y, w)
    if w.min() < 1.0:
        raise ValueError("weight map must be >= 1 everywhere")
    if cfg.weight_mode == MODE_NORMALIZED:
        return _weighted_normalized(p, y, w, cfg)
    return _weighted_literal(p, y, w, cfg)


@dataclass(frozen=True)
class Stage2LossReport:
    """Per-task reports (gradients unscaled) plus the beta-combined value."""

    la: LossReport
    scar: LossReport
    value: float


def stage2_loss(
    pred_la,
    gt_la,
    pred_scar,
    gt_scar,
    weights,
    beta_la: float = 0.3,
    beta_scar: float = 0.7,
    cfg: LossConfig = LossConfig(),
) -> Stage2LossReport:
    """Dual-task composite: beta_la * DiceCE(LA) + beta_scar * weighted scar loss."""
    la = dice_ce_loss(pred_la, gt_la, cfg)
    scar = weighted_scar_loss(pred_scar, gt_scar, weights, cfg)
    return Stage2LossReport(la, scar, beta_la * la.value + beta_scar * scar.value)
