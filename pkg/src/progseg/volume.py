"""Core volume type, NIfTI-1 subset I/O, and preprocessing operations.

Volumes are immutable value objects: every operation returns a new Volume.
Arrays are indexed [x, y, z]; on disk (NIfTI-1) the payload is x-fastest,
which matches Fortran-order serialization of that layout.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

INTENSITY = "intensity"
LABEL = "label"
WEIGHT = "weight"

_KINDS = (INTENSITY, LABEL, WEIGHT)


class NiftiFormatError(ValueError):
    """Malformed NIfTI-1 header or payload."""


class NiftiUnsupportedError(ValueError):
    """Well-formed NIfTI file outside the supported subset."""


@dataclass(frozen=True)
class Volume:
    """A dense 3D grid with physical voxel spacing in mm.

    data: float64 array of shape (nx, ny, nz), indexed [x, y, z]
    spacing: (sx, sy, sz) in mm, each > 0
    kind: "intensity", "label" (binary {0,1}) or "weight" (values >= 1)
    """

    data: np.ndarray
    spacing: tuple[float, float, float]
    kind: str = INTENSITY

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        if any(n < 1 for n in arr.shape):
            raise ValueError(f"volume dims must be positive, got {arr.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive mm values, got {self.spacing}")
        if self.kind not in _KINDS:
            raise ValueError(f"unknown volume kind {self.kind!r}")
        if self.kind == LABEL and not np.isin(arr, (0.0, 1.0)).all():
            raise ValueError("label volume must contain only {0, 1}")
        if self.kind == WEIGHT and arr.min() < 1.0:
            raise ValueError("weight volume must contain only values >= 1")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, kind: str | None = None) -> "Volume":
        return Volume(data, self.spacing, self.kind if kind is None else kind)

    def same_grid(self, other: "Volume") -> bool:
        return self.dims == other.dims and self.spacing == other.spacing


@dataclass(frozen=True)
class PatchSpec:
    """Patch extraction request: size in voxels plus an origin policy."""

    size: tuple[int, int, int]
    policy: str = "random"  # "centered-on-label" | "fixed" | "random"
    fixed_origin: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.policy not in ("centered-on-label", "fixed", "random"):
            raise ValueError(f"unknown patch policy {self.policy!r}")
        if any(p < 1 for p in self.size):
            raise ValueError(f"patch size must be positive, got {self.size}")


# ---------------------------------------------------------------------------
# NIfTI-1 subset: single-file, uncompressed, little-endian, dtypes {2, 4, 16}.
# Header is 348 bytes + 4-byte extension flag; payload at vox_offset >= 352.
# ---------------------------------------------------------------------------

_DT_UINT8 = 2
_DT_INT16 = 4
_DT_FLOAT32 = 16

_NP_DTYPES = {
    _DT_UINT8: np.dtype("<u1"),
    _DT_INT16: np.dtype("<i2"),
    _DT_FLOAT32: np.dtype("<f4"),
}


def read_nifti(path) -> Volume:
    """Read a single-file uncompressed NIfTI-1 volume.

    Spacing is taken from pixdim[1..3]; orientation is ignored. Data is
    returned as float; scl_slope/scl_inter rescaling is applied unless it is
    the identity (slope in {0, 1}, inter 0). Label detection is by dtype:
    uint8 payloads whose values are all in {0, 1} come back as label volumes.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 352:
        raise NiftiFormatError(f"file too short for NIfTI-1 header ({len(raw)} bytes, offset 0)")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != 348:
        raise NiftiFormatError(f"sizeof_hdr = {sizeof_hdr}, expected 348 (byte offset 0)")
    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiUnsupportedError('two-file NIfTI (magic "ni1") is not supported')
    if magic != b"n+1\x00":
        raise NiftiFormatError(f"bad magic {magic!r} (byte offset 344)")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"dim[0] = {ndim} out of range (byte offset 40)")
    if ndim > 3 and any(d > 1 for d in dim[4 : ndim + 1]):
        raise NiftiUnsupportedError(f"4D+ volumes not supported (dim = {dim[: ndim + 1]})")
    nx, ny, nz = (max(1, dim[i]) for i in (1, 2, 3))
    datatype = struct.unpack_from("<h", raw, 70)[0]
    if datatype not in _NP_DTYPES:
        raise NiftiUnsupportedError(f"unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(abs(p) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        raise NiftiFormatError(f"non-positive pixdim {pixdim[1:4]} (byte offset 76)")
    vox_offset = struct.unpack_from("<f", raw, 108)[0]
    if vox_offset < 352:
        raise NiftiFormatError(f"vox_offset = {vox_offset} < 352 (byte offset 108)")
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)

    dtype = _NP_DTYPES[datatype]
    count = nx * ny * nz
    start = int(vox_offset)
    payload = raw[start : start + count * dtype.itemsize]
    if len(payload) != count * dtype.itemsize:
        raise NiftiFormatError(
            f"payload truncated: need {count * dtype.itemsize} bytes at offset {start}"
        )
    flat = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    if not (scl_slope in (0.0, 1.0) and scl_inter == 0.0):
        flat = flat * scl_slope + scl_inter
    data = flat.reshape((nx, ny, nz), order="F")

    kind = INTENSITY
    if datatype == _DT_UINT8 and np.isin(data, (0.0, 1.0)).all():
        kind = LABEL
    return Volume(data, spacing, kind)


def write_nifti(v: Volume, path) -> None:
    """Write a Volume as single-file NIfTI-1.

    Labels are stored as uint8; intensity and weight volumes as float32.
    Round-trips are bit-exact for float32 payloads.
    """
    datatype = _DT_UINT8 if v.kind == LABEL else _DT_FLOAT32
    dtype = _NP_DTYPES[datatype]
    hdr = bytearray(348)
    struct.pack_into("<i", hdr, 0, 348)
    nx, ny, nz = v.dims
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    sx, sy, sz = v.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # identity scaling
    hdr[344:348] = b"n+1\x00"
    payload = np.asfortranarray(v.data.astype(dtype)).tobytes(order="F")
    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(payload)


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def resample(v: Volume, target_spacing: tuple[float, float, float]) -> Volume:
    """Resample to a new spacing; trilinear for intensity, nearest for labels.

    Output dims = round(dims * spacing / target_spacing), at least 1 per axis.
    Sampling coordinates are clamped to the input grid, so the (sub-voxel)
    edge overhang replicates the boundary instead of extrapolating to zero;
    constant fields therefore stay constant.
    """
    ts = tuple(float(s) for s in target_spacing)
    if any(s <= 0 for s in ts):
        raise ValueError(f"target spacing must be positive, got {ts}")
    out_dims = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(v.dims, v.spacing, ts)
    )
    if out_dims == v.dims and ts == v.spacing:
        return v
    # Output voxel i maps to input index i * target / spacing.
    grids = np.meshgrid(
        *[np.arange(n) * t / s for n, s, t in zip(out_dims, v.spacing, ts)],
        indexing="ij",
    )
    order = 0 if v.kind == LABEL else 1
    data = ndimage.map_coordinates(v.data, np.stack(grids), order=order, mode="nearest")
    return Volume(data, ts, v.kind)


def center_crop_or_pad(v: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Symmetric center crop when larger, zero-pad when smaller, per axis."""
    td = tuple(int(t) for t in target_dims)
    if any(t < 1 for t in td):
        raise ValueError(f"target dims must be positive, got {td}")
    data = v.data
    for ax, (n, t) in enumerate(zip(data.shape, td)):
        if n > t:
            lo = (n - t) // 2
            data = np.take(data, np.arange(lo, lo + t), axis=ax)
        elif n < t:
            before = (t - n) // 2
            pad = [(0, 0)] * 3
            pad[ax] = (before, t - n - before)
            data = np.pad(data, pad)
    return Volume(data, v.spacing, v.kind)


def zscore(v: Volume) -> Volume:
    """Z-score normalize an intensity volume (population std, zero-std guard)."""
    if v.kind != INTENSITY:
        raise ValueError("zscore expects an intensity volume")
    if v.data.size < 2:
        raise ValueError("zscore needs at least 2 voxels")
    mean = v.data.mean()
    std = v.data.std()
    if std < 1e-12:
        return v.with_data(np.zeros_like(v.data))
    return v.with_data((v.data - mean) / std)


def sample_patch_origin(
    dims: tuple[int, int, int], spec: PatchSpec, seed: int, label: Volume | None = None
) -> tuple[int, int, int]:
    """Draw the patch origin for the given policy, deterministically in seed.

    "centered-on-label" centers the patch on a uniformly chosen foreground
    voxel of the companion label (origin clamped to bounds) and falls back to
    the random policy when the label is empty.
    """
    if any(p > n for p, n in zip(spec.size, dims)):
        raise ValueError(f"patch {spec.size} does not fit in volume {dims}")
    rng = np.random.default_rng(seed)
    policy = spec.policy
    if policy == "centered-on-label":
        if label is None or not label.data.any():
            logger.info("centered-on-label patch with empty label: falling back to random")
            policy = "random"
        else:
            fg = np.argwhere(label.data > 0)
            center = fg[rng.integers(len(fg))]
            return tuple(
                int(np.clip(c - p // 2, 0, n - p))
                for c, p, n in zip(center, spec.size, dims)
            )
    if policy == "random":
        return tuple(int(rng.integers(0, n - p + 1)) for p, n in zip(spec.size, dims))
    origin = spec.fixed_origin
    if any(o < 0 or o + p > n for o, p, n in zip(origin, spec.size, dims)):
        raise ValueError(f"fixed origin {origin} puts patch outside volume {dims}")
    return origin


def crop_at(v: Volume, origin: tuple[int, int, int], size: tuple[int, int, int]) -> Volume:
    ox, oy, oz = origin
    px, py, pz = size
    return v.with_data(v.data[ox : ox + px, oy : oy + py, oz : oz + pz])


def extract_patch(
    v: Volume, spec: PatchSpec, seed: int, label: Volume | None = None
) -> Volume:
    """Extract a patch, deterministically given the seed."""
    origin = sample_patch_origin(v.dims, spec, seed, label)
    return crop_at(v, origin, spec.size)
