"""Segmentation evaluation metrics: Dice, Hausdorff, average surface distance.

Surface voxels are foreground voxels with at least one background 6-neighbor
(out-of-bounds counts as background). Surface distances are voxel-center
distances in mm, computed exactly via the EDT of the opposite surface set.
HD is the exact maximum by default; an HD95 variant is available.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from progseg.edt import edt_from_seeds
from progseg.volume import LABEL, Volume


@dataclass(frozen=True)
class MetricReport:
    dsc: float
    hd_mm: float
    asd_mm: float
    pred_fg: int
    gt_fg: int


def _mask(v: Volume) -> np.ndarray:
    if v.kind != LABEL:
        raise ValueError("metrics expect binary label volumes")
    return v.data > 0


def dice_score(pred: Volume, gt: Volume) -> float:
    """Overlap Dice 2|P&G| / (|P|+|G|); 1.0 when both masks are empty."""
    p, g = _mask(pred), _mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"grid mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def surface_voxels(mask: Volume) -> np.ndarray:
    """Boolean array marking foreground voxels with a background 6-neighbor."""
    m = _mask(mask)
    padded = np.pad(m, 1)
    has_bg = np.zeros_like(m)
    for ax in range(3):
        for sl in (slice(0, -2), slice(2, None)):
            idx = [slice(1, -1)] * 3
            idx[ax] = sl
            has_bg |= ~padded[tuple(idx)]
    return m & has_bg


def _surface_distances(pred: Volume, gt: Volume):
    p, g = _mask(pred), _mask(gt)
    if p.shape != g.shape:
        raise ValueError(f"grid mismatch: {p.shape} vs {g.shape}")
    if pred.spacing != gt.spacing:
        raise ValueError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")
    if not p.any() or not g.any():
        raise ValueError("undefined surface distance for empty mask")
    sp = surface_voxels(pred)
    sg = surface_voxels(gt)
    dims = p.shape
    d_to_g = edt_from_seeds(sg, pred.spacing, dims)
    d_to_p = edt_from_seeds(sp, pred.spacing, dims)
    return d_to_g[sp], d_to_p[sg]  # directed distances per surface voxel


def hausdorff(pred: Volume, gt: Volume, percentile: float | None = None) -> float:
    """Symmetric Hausdorff distance in mm (exact max; percentile optional)."""
    dp, dg = _surface_distances(pred, gt)
    if percentile is None:
        return float(max(dp.max(), dg.max()))
    pooled = np.concatenate([dp, dg])
    return float(np.percentile(pooled, percentile))


def asd(pred: Volume, gt: Volume) -> float:
    """Average symmetric surface distance: both directed sums pooled over
    the combined surface voxel count."""
    dp, dg = _surface_distances(pred, gt)
    return float((dp.sum() + dg.sum()) / (len(dp) + len(dg)))


def evaluate_pair(pred: Volume, gt: Volume) -> MetricReport:
    """Full metric report; HD/ASD are NaN when either mask is empty."""
    p, g = _mask(pred), _mask(gt)
    dsc = dice_score(pred, gt)
    if p.any() and g.any():
        hd_mm, asd_mm = hausdorff(pred, gt), asd(pred, gt)
    else:
        hd_mm = asd_mm = float("nan")
    return MetricReport(dsc, hd_mm, asd_mm, int(p.sum()), int(g.sum()))
