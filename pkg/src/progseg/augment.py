"""Stochastic on-the-fly 3D augmentation pipeline.

Eight transforms applied in a fixed order, each gated by its own probability
with parameters sampled uniformly from configured ranges. Spatial transforms
(elastic, rotation, zoom) warp image and labels jointly (trilinear vs
nearest-neighbor); intensity transforms leave labels untouched. Everything is
driven by a single seeded generator, so (seed, config) fully determines the
output.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from progseg.volume import INTENSITY, LABEL, Volume

SPATIAL_KINDS = ("elastic", "rotation", "zoom")
INTENSITY_KINDS = ("bias", "blur", "contrast", "shift", "noise")
_SEEDED_KINDS = ("bias", "elastic", "noise")  # draw their own field noise


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    probability: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SPATIAL_KINDS + INTENSITY_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must be in [0, 1], got {self.probability}")


def default_pipeline() -> list[TransformSpec]:
    """Default specs: probabilities and ranges of the standard recipe."""
    return [
        TransformSpec("bias", 0.15, {"coeff_scale": (0.02, 0.06), "order": 3}),
        TransformSpec("elastic", 0.10, {"sigma": (3.0, 5.0), "amp_xy": (3.0, 6.0), "amp_z": (2.0, 5.0)}),
        TransformSpec("rotation", 0.50, {"angle": (-15.0, 15.0)}),
        TransformSpec("zoom", 0.30, {"factor": (0.9, 1.1)}),
        TransformSpec("blur", 0.20, {"sigma": (0.5, 1.5)}),
        TransformSpec("contrast", 0.30, {"gamma": (0.8, 1.3)}),
        TransformSpec("shift", 0.50, {"delta": (-0.1, 0.1)}),
        TransformSpec("noise", 0.20, {"mu": 0.0, "sigma": 0.02}),
    ]


# ---------------------------------------------------------------------------
# Individual transforms
# ---------------------------------------------------------------------------


def _warp(vol: Volume, coords: np.ndarray) -> Volume:
    # snap float noise onto the grid so e.g. an exact 90-degree rotation does
    # not push border samples an epsilon outside and zero-fill them
    snapped = np.round(coords)
    coords = np.where(np.abs(coords - snapped) < 1e-9, snapped, coords)
    order = 0 if vol.kind == LABEL else 1
    data = ndimage.map_coordinates(vol.data, coords, order=order, mode="constant", cval=0.0)
    return vol.with_data(data)


def _inplane_affine_coords(dims, inv00, inv01, inv10, inv11):
    """Backward-mapping coordinates for an in-plane (x-y) linear map about center."""
    nx, ny, nz = dims
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0
    x, y, z = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    dx, dy = x - cx, y - cy
    return np.stack([cx + inv00 * dx + inv01 * dy, cy + inv10 * dx + inv11 * dy, z])


def t_rotation(img: Volume, labels: list[Volume], angle: float):
    """In-plane rotation about the volume center, zero fill."""
    if angle == 0.0:
        return img, list(labels)
    rad = np.deg2rad(angle)
    c, s = np.cos(rad), np.sin(rad)
    coords = _inplane_affine_coords(img.dims, c, s, -s, c)  # inverse rotation
    return _warp(img, coords), [_warp(l, coords) for l in labels]


def t_zoom(img: Volume, labels: list[Volume], factor: float):
    """Isotropic in-plane scaling about the center, same output dims."""
    if factor == 1.0:
        return img, list(labels)
    inv = 1.0 / factor
    coords = _inplane_affine_coords(img.dims, inv, 0.0, 0.0, inv)
    return _warp(img, coords), [_warp(l, coords) for l in labels]


def t_elastic(
    img: Volume,
    labels: list[Volume],
    sigma: float,
    amp: tuple[float, float, float],
    seed: int,
):
    """Random dense displacement field, Gaussian-smoothed, backward-mapped.

    Per axis: white noise U(-1, 1) smoothed with std sigma (voxels), rescaled
    so the max absolute displacement equals the sampled amplitude.
    """
    if all(a == 0.0 for a in amp):
        return img, list(labels)
    rng = np.random.default_rng(seed)
    dims = img.dims
    disp = []
    for a in amp:
        f = ndimage.gaussian_filter(rng.uniform(-1.0, 1.0, dims), sigma)
        peak = np.abs(f).max()
        disp.append(f * (a / peak) if peak > 0 else np.zeros(dims))
    base = np.indices(dims).astype(np.float64)
    coords = base + np.stack(disp)
    return _warp(img, coords), [_warp(l, coords) for l in labels]


def _normalized_coords(dims):
    axes = [np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(n) for n in dims]
    return np.meshgrid(*axes, indexing="ij")


def t_bias(img: Volume, coeff_scale: float, seed: int, order: int = 3) -> Volume:
    """Multiplicative smooth bias field exp(P) with a random degree-`order`
    polynomial P over coordinates normalized to [-1, 1]."""
    rng = np.random.default_rng(seed)
    xn, yn, zn = _normalized_coords(img.dims)
    poly = np.zeros(img.dims)
    for a in range(order + 1):
        for b in range(order + 1 - a):
            for c in range(order + 1 - a - b):
                coeff = rng.uniform(-coeff_scale, coeff_scale)
                poly += coeff * xn**a * yn**b * zn**c
    return img.with_data(img.data * np.exp(poly))


def t_blur(img: Volume, sigma: float) -> Volume:
    """Separable Gaussian blur, sigma in voxel units."""
    return img.with_data(ndimage.gaussian_filter(img.data, sigma))


def t_contrast(img: Volume, gamma: float) -> Volume:
    """Power remap on min-max-normalized intensities, range restored."""
    if gamma == 1.0:
        return img
    lo, hi = img.data.min(), img.data.max()
    if hi - lo < 1e-12:
        return img
    norm = (img.data - lo) / (hi - lo)
    return img.with_data(lo + (hi - lo) * norm**gamma)


def t_shift(img: Volume, delta: float) -> Volume:
    """Uniform additive intensity shift."""
    return img.with_data(img.data + delta)


def t_noise(img: Volume, mu: float, sigma: float, seed: int) -> Volume:
    """Additive i.i.d. Gaussian noise."""
    rng = np.random.default_rng(seed)
    return img.with_data(img.data + rng.normal(mu, sigma, img.dims))


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _sample_range(rng, r):
    lo, hi = r
    return float(rng.uniform(lo, hi))


def plan_pipeline(pipeline: list[TransformSpec], seed: int) -> list[tuple[str, dict]]:
    """Draw all gates and parameters without touching any image.

    Consumes the generator exactly as apply_pipeline does, so the returned
    plan is what a same-seed application would execute.
    """
    rng = np.random.default_rng(seed)
    plan = []
    for spec in pipeline:
        if rng.random() >= spec.probability:
            continue
        p = spec.params
        if spec.kind == "bias":
            drawn = {"coeff_scale": _sample_range(rng, p["coeff_scale"]), "order": p.get("order", 3)}
        elif spec.kind == "elastic":
            drawn = {
                "sigma": _sample_range(rng, p["sigma"]),
                "amp": (
                    _sample_range(rng, p["amp_xy"]),
                    _sample_range(rng, p["amp_xy"]),
                    _sample_range(rng, p["amp_z"]),
                ),
            }
        elif spec.kind == "rotation":
            drawn = {"angle": _sample_range(rng, p["angle"])}
        elif spec.kind == "zoom":
            drawn = {"factor": _sample_range(rng, p["factor"])}
        elif spec.kind == "blur":
            drawn = {"sigma": _sample_range(rng, p["sigma"])}
        elif spec.kind == "contrast":
            drawn = {"gamma": _sample_range(rng, p["gamma"])}
        elif spec.kind == "shift":
            drawn = {"delta": _sample_range(rng, p["delta"])}
        else:  # noise
            drawn = {"mu": p["mu"], "sigma": p["sigma"]}
        if spec.kind in _SEEDED_KINDS:
            drawn["seed"] = int(rng.integers(0, 2**31 - 1))
        plan.append((spec.kind, drawn))
    return plan


def apply_pipeline(
    img: Volume,
    labels: list[Volume],
    seed: int,
    pipeline: list[TransformSpec] | None = None,
):
    """Apply the gated transform sequence; returns (image, labels)."""
    if pipeline is None:
        pipeline = default_pipeline()
    for l in labels:
        if not l.same_grid(img):
            raise ValueError("image/label grid mismatch")
        if l.kind != LABEL:
            raise ValueError("labels must be binary label volumes")
    labels = list(labels)
    for kind, p in plan_pipeline(pipeline, seed):
        if kind == "bias":
            img = t_bias(img, p["coeff_scale"], p["seed"], p["order"])
        elif kind == "elastic":
            img, labels = t_elastic(img, labels, p["sigma"], p["amp"], p["seed"])
        elif kind == "rotation":
            img, labels = t_rotation(img, labels, p["angle"])
        elif kind == "zoom":
            img, labels = t_zoom(img, labels, p["factor"])
        elif kind == "blur":
            img = t_blur(img, p["sigma"])
        elif kind == "contrast":
            img = t_contrast(img, p["gamma"])
        elif kind == "shift":
            img = t_shift(img, p["delta"])
        elif kind == "noise":
            img = t_noise(img, p["mu"], p["sigma"], p["seed"])
    return img, labels


def load_pipeline_config(path) -> list[TransformSpec]:
    """Override defaults from a line-oriented `kind.field = value` file.

    Ranges are comma-separated pairs, e.g. `rotation.angle = -10, 10`;
    probabilities are single floats, e.g. `elastic.probability = 0`.
    """
    pipeline = {s.kind: s for s in default_pipeline()}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line or "." not in line.split("=", 1)[0]:
                raise ValueError(f"{path}:{lineno}: expected 'kind.field = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            kind, fieldname = key.split(".", 1)
            if kind not in pipeline:
                raise ValueError(f"{path}:{lineno}: unknown transform {kind!r}")
            parts = [float(v) for v in value.split(",")]
            spec = pipeline[kind]
            if fieldname == "probability":
                pipeline[kind] = replace(spec, probability=parts[0])
            else:
                params = dict(spec.params)
                if fieldname not in params:
                    raise ValueError(f"{path}:{lineno}: unknown field {fieldname!r} for {kind}")
                params[fieldname] = tuple(parts) if len(parts) > 1 else parts[0]
                pipeline[kind] = replace(spec, params=params)
    return [pipeline[s.kind] for s in default_pipeline()]
