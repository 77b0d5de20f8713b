"""Exact anisotropic Euclidean distance transform."""

import numpy as np
import pytest

from progseg.edt import TO_BACKGROUND, TO_FOREGROUND, edt, edt_from_seeds
from progseg.volume import LABEL, Volume


def label(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float64), spacing, LABEL)


def brute_force(mask, spacing):
    """All-pairs oracle: min distance from every voxel to any seed center."""
    seeds = np.argwhere(mask) * np.asarray(spacing)
    coords = np.argwhere(np.ones_like(mask)) * np.asarray(spacing)
    d = np.sqrt(((coords[:, None, :] - seeds[None, :, :]) ** 2).sum(-1)).min(1)
    return d.reshape(mask.shape)


def test_all_foreground_is_zero():
    out = edt(label(np.ones((3, 3, 3))), TO_FOREGROUND)
    np.testing.assert_array_equal(out.data, 0.0)


def test_single_center_seed_corner_sqrt3():
    mask = np.zeros((3, 3, 3))
    mask[1, 1, 1] = 1.0
    out = edt(label(mask), TO_FOREGROUND)
    assert out.data[0, 0, 0] == pytest.approx(np.sqrt(3.0))
    assert out.data[1, 1, 1] == 0.0


def test_anisotropic_axis_distance():
    mask = np.zeros((2, 2, 2))
    mask[0, 0, 0] = 1.0
    out = edt(label(mask, spacing=(0.625, 0.625, 2.5)), TO_FOREGROUND)
    assert out.data[0, 0, 1] == pytest.approx(2.5)


def test_empty_seed_set_raises():
    with pytest.raises(ValueError, match="no seed voxels"):
        edt(label(np.zeros((2, 2, 2))), TO_FOREGROUND)
    with pytest.raises(ValueError, match="no seed voxels"):
        edt(label(np.ones((2, 2, 2))), TO_BACKGROUND)


def test_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(0)
    for _ in range(20):
        dims = tuple(rng.integers(2, 9, 3))
        mask = (rng.random(dims) > 0.7).astype(float)
        if not mask.any():
            mask.flat[0] = 1.0
        spacing = tuple(rng.uniform(0.3, 3.0, 3))
        got = edt(label(mask, spacing), TO_FOREGROUND).data
        want = brute_force(mask > 0, spacing)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)


def test_mirror_symmetry():
    rng = np.random.default_rng(1)
    mask = (rng.random((6, 5, 4)) > 0.8).astype(float)
    mask.flat[0] = 1.0
    spacing = (0.7, 1.1, 2.3)
    base = edt(label(mask, spacing), TO_FOREGROUND).data
    for axis in range(3):
        flipped = edt(label(np.flip(mask, axis), spacing), TO_FOREGROUND).data
        np.testing.assert_allclose(np.flip(flipped, axis), base, rtol=1e-12)


def test_monotonicity_under_added_seeds():
    rng = np.random.default_rng(2)
    mask = (rng.random((6, 6, 6)) > 0.9).astype(float)
    mask.flat[0] = 1.0
    more = mask.copy()
    free = np.argwhere(more == 0)
    extra = free[rng.choice(len(free), 5, replace=False)]
    more[extra[:, 0], extra[:, 1], extra[:, 2]] = 1.0
    d1 = edt(label(mask), TO_FOREGROUND).data
    d2 = edt(label(more), TO_FOREGROUND).data
    assert (d2 <= d1 + 1e-12).all()


def test_lipschitz_in_physical_metric():
    rng = np.random.default_rng(3)
    mask = (rng.random((8, 8, 8)) > 0.85).astype(float)
    mask.flat[0] = 1.0
    spacing = (0.8, 1.0, 1.7)
    d = edt(label(mask, spacing), TO_FOREGROUND).data
    for axis, s in enumerate(spacing):
        diff = np.abs(np.diff(d, axis=axis))
        assert diff.max() <= s + 1e-9


def test_edt_from_seeds_matches_mask_path():
    rng = np.random.default_rng(4)
    mask = (rng.random((5, 5, 5)) > 0.7)
    mask.flat[2] = True
    spacing = (1.0, 1.5, 2.0)
    via_seeds = edt_from_seeds(mask, spacing, mask.shape)
    via_mask = edt(label(mask.astype(float), spacing), TO_FOREGROUND).data
    np.testing.assert_allclose(via_seeds, via_mask, rtol=1e-12)
