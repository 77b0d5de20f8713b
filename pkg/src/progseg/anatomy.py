"""Anatomical priors: LA wall band, spatial weight map, and the alpha ramp.

The wall is a band around the cavity surface: voxels inside the cavity whose
center lies within delta_in mm of the background, plus voxels outside within
delta_out mm of the cavity. The weight map up-weights that band in the scar
loss by 1 + alpha, with alpha ramped up over training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from progseg.edt import TO_BACKGROUND, TO_FOREGROUND, edt
from progseg.volume import LABEL, WEIGHT, Volume


@dataclass(frozen=True)
class WallParams:
    """Inward/outward wall band thickness in mm."""

    delta_in: float = 3.0
    delta_out: float = 2.5

    def __post_init__(self):
        if not (np.isfinite(self.delta_in) and self.delta_in >= 0):
            raise ValueError(f"delta_in must be finite and >= 0, got {self.delta_in}")
        if not (np.isfinite(self.delta_out) and self.delta_out >= 0):
            raise ValueError(f"delta_out must be finite and >= 0, got {self.delta_out}")


@dataclass(frozen=True)
class AlphaSchedule:
    """Linear ramp from 0 to alpha_max over ramp_epochs epochs."""

    alpha_max: float = 1.0
    ramp_epochs: int = 50

    def __post_init__(self):
        if self.alpha_max < 0:
            raise ValueError(f"alpha_max must be >= 0, got {self.alpha_max}")
        if self.ramp_epochs < 1:
            raise ValueError(f"ramp_epochs must be positive, got {self.ramp_epochs}")


def alpha_at(schedule: AlphaSchedule, epoch: int) -> float:
    """Ramp value at a given epoch: min(1, epoch / ramp_epochs) * alpha_max."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return min(1.0, epoch / schedule.ramp_epochs) * schedule.alpha_max


def wall_mask(la: Volume, params: WallParams = WallParams()) -> Volume:
    """Binary wall band around the LA cavity surface.

    A voxel is wall iff it is inside the cavity with distance-to-background
    <= delta_in, or outside with distance-to-cavity <= delta_out (voxel-center
    distances in mm).
    """
    if la.kind != LABEL:
        raise ValueError("wall_mask expects a binary LA label")
    inside = la.data > 0
    if not inside.any() or inside.all():
        raise ValueError("degenerate LA mask")
    d_in = edt(la, TO_BACKGROUND).data
    d_out = edt(la, TO_FOREGROUND).data
    wall = (inside & (d_in <= params.delta_in)) | (~inside & (d_out <= params.delta_out))
    return Volume(wall.astype(np.float64), la.spacing, LABEL)


def weight_map(mask: Volume, alpha: float) -> Volume:
    """Spatial weight map W = 1 + alpha * mask."""
    if mask.kind != LABEL:
        raise ValueError("weight_map expects a binary mask")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return Volume(1.0 + alpha * mask.data, mask.spacing, WEIGHT)


@dataclass(frozen=True)
class PlausibilityReport:
    """Scar voxels falling outside the wall band."""

    outside_count: int
    outside_fraction: float


def plausibility_audit(scar: Volume, wall: Volume) -> PlausibilityReport:
    """Count scar voxels not covered by the wall mask.

    An empty scar mask yields (0, 0.0).
    """
    if scar.kind != LABEL or wall.kind != LABEL:
        raise ValueError("plausibility_audit expects binary masks")
    if not scar.same_grid(wall):
        raise ValueError(f"grid mismatch: {scar.dims}/{scar.spacing} vs {wall.dims}/{wall.spacing}")
    scar_vox = scar.data > 0
    total = int(scar_vox.sum())
    outside = int((scar_vox & (wall.data == 0)).sum())
    return PlausibilityReport(outside, outside / total if total else 0.0)
