"""Procedural LGE-like phantom volumes.

Each phantom has an ellipsoidal cavity, a wall band around its surface, and
hyperintense scar patches seeded on that band. A configurable fraction of
scar voxels can be relocated outside the wall to mimic anatomically
implausible annotations: they are dropped as one compact hyperintense blob
well clear of the wall, i.e. a lesion-looking structure where no scar can be.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from progseg.anatomy import WallParams, wall_mask
from progseg.edt import edt
from progseg.volume import INTENSITY, LABEL, Volume


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (96, 96, 24)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    cavity_semi_axes_mm: tuple[float, float, float] = (20.0, 16.0, 7.0)
    center_jitter_mm: float = 3.0
    wall: WallParams = WallParams()
    scar_fraction: float = 0.0069
    patch_count_range: tuple[int, int] = (4, 8)
    patch_radius_mm: tuple[float, float] = (1.5, 3.0)
    noise_std: float = 0.03
    bias_strength: float = 0.0
    implausible_scar_fraction: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.implausible_scar_fraction <= 1.0:
            raise ValueError("implausible_scar_fraction must be in [0, 1]")
        if self.scar_fraction <= 0:
            raise ValueError("scar_fraction must be > 0")


def _ball_voxels(center, radius_mm, dims, spacing):
    """Voxel indices within radius_mm (physical) of a voxel center."""
    rx, ry, rz = (max(1, int(np.ceil(radius_mm / s))) for s in spacing)
    cx, cy, cz = center
    xs = np.arange(max(0, cx - rx), min(dims[0], cx + rx + 1))
    ys = np.arange(max(0, cy - ry), min(dims[1], cy + ry + 1))
    zs = np.arange(max(0, cz - rz), min(dims[2], cz + rz + 1))
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    d2 = (
        ((gx - cx) * spacing[0]) ** 2
        + ((gy - cy) * spacing[1]) ** 2
        + ((gz - cz) * spacing[2]) ** 2
    )
    keep = d2 <= radius_mm**2
    return gx[keep], gy[keep], gz[keep]


def _smooth_bias_field(dims, strength, rng):
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(n) for n in dims]
    xn, yn, zn = np.meshgrid(*axes, indexing="ij")
    poly = np.zeros(dims)
    for a in range(4):
        for b in range(4 - a):
            for c in range(4 - a - b):
                poly += rng.uniform(-strength, strength) * xn**a * yn**b * zn**c
    return np.exp(poly)


def generate(spec: PhantomSpec, seed: int):
    """Generate one phantom; returns (image, la, scar), deterministic in seed."""
    rng = np.random.default_rng(seed)
    dims, spacing = spec.dims, spec.spacing
    extent = np.array(dims) * np.array(spacing)
    semi = np.array(spec.cavity_semi_axes_mm)
    if np.any(2 * semi >= extent):
        raise ValueError(f"cavity {tuple(semi)} mm does not fit in extent {tuple(extent)} mm")

    center_mm = extent / 2.0 + rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm, 3)
    coords_mm = [
        (np.arange(n) * s).reshape([-1 if i == 0 else 1, -1 if i == 1 else 1, -1 if i == 2 else 1])
        for i, (n, s) in enumerate(zip(dims, spacing))
    ]
    q = sum(((c - m) / a) ** 2 for c, m, a in zip(coords_mm, center_mm, semi))
    la_data = (q <= 1.0).astype(np.float64)
    la = Volume(la_data, spacing, LABEL)
    wall = wall_mask(la, spec.wall)
    wall_bool = wall.data > 0

    n_target = int(round(spec.scar_fraction * la_data.size))
    n_wall = int(wall_bool.sum())
    if n_target > n_wall:
        raise ValueError(f"scar target {n_target} voxels exceeds wall volume {n_wall}")

    wall_sites = np.argwhere(wall_bool)
    scar = np.zeros(dims, dtype=bool)
    min_patches = int(rng.integers(spec.patch_count_range[0], spec.patch_count_range[1] + 1))
    placed = 0
    while placed < min_patches or scar.sum() < n_target:
        center = wall_sites[rng.integers(len(wall_sites))]
        radius = rng.uniform(*spec.patch_radius_mm)
        ix, iy, iz = _ball_voxels(center, radius, dims, spacing)
        keep = wall_bool[ix, iy, iz]  # scar confined to the wall band
        prev = scar.copy()
        scar[ix[keep], iy[keep], iz[keep]] = True
        placed += 1
        if scar.sum() > 1.3 * n_target:
            # trim the newest patch back to the target count
            new = np.argwhere(scar & ~prev)
            excess = int(scar.sum()) - n_target
            drop = new[rng.choice(len(new), size=min(excess, len(new)), replace=False)]
            scar[drop[:, 0], drop[:, 1], drop[:, 2]] = False
        if placed > 200:
            raise ValueError("unable to reach scar fraction target")

    n_scar = int(scar.sum())
    n_move = int(round(spec.implausible_scar_fraction * n_scar))
    if n_move:
        scar_sites = np.argwhere(scar)
        move = scar_sites[rng.choice(len(scar_sites), size=n_move, replace=False)]
        scar[move[:, 0], move[:, 1], move[:, 2]] = False
        # Drop the moved voxels as one compact blob well clear of the wall
        # band, so the implausible annotation looks like a genuine lesion.
        wall_dist = edt(wall, source="distance-to-foreground").data
        est_radius = (3.0 * n_move * np.prod(spacing) / (4.0 * np.pi)) ** (1.0 / 3.0)
        clear = np.argwhere(wall_dist > est_radius + max(spacing))
        if len(clear) == 0:
            clear = np.argwhere(~wall_bool & ~scar)
        center = clear[rng.integers(len(clear))]
        free = np.argwhere(~wall_bool & ~scar)
        d2 = (((free - center) * np.asarray(spacing)) ** 2).sum(axis=1)
        dest = free[np.argsort(d2)[:n_move]]
        scar[dest[:, 0], dest[:, 1], dest[:, 2]] = True

    cavity_interior = (la_data > 0) & ~wall_bool
    image = np.full(dims, 0.2)
    image[wall_bool] = 0.35
    image[cavity_interior] = 0.5
    image[scar] = 0.8
    image += rng.normal(0.0, spec.noise_std, dims)
    if spec.bias_strength > 0:
        image *= _smooth_bias_field(dims, spec.bias_strength, rng)

    return (
        Volume(image, spacing, INTENSITY),
        la,
        Volume(scar.astype(np.float64), spacing, LABEL),
    )
