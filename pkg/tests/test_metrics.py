"""Dice, Hausdorff, and average symmetric surface distance."""

import numpy as np
import pytest

from progseg.metrics import asd, dice_score, evaluate_pair, hausdorff, surface_voxels
from progseg.volume import LABEL, Volume


def label(data, spacing=(1.0, 1.0, 1.0)):
    return Volume(np.asarray(data, dtype=np.float64), spacing, LABEL)


def single(dims, idx):
    data = np.zeros(dims)
    data[idx] = 1.0
    return label(data)


def brute_surfaces(mask):
    """Foreground voxels with a 6-neighbor background (OOB = background)."""
    out = []
    dims = mask.shape
    for idx in np.argwhere(mask):
        for ax in range(3):
            for d in (-1, 1):
                n = idx.copy()
                n[ax] += d
                if not (0 <= n[ax] < dims[ax]) or not mask[tuple(n)]:
                    out.append(tuple(idx))
                    break
            else:
                continue
            break
    return set(out)


def brute_metrics(pred, gt):
    sp = np.asarray(pred.spacing)
    ps = np.array(sorted(brute_surfaces(pred.data > 0))) * sp
    gs = np.array(sorted(brute_surfaces(gt.data > 0))) * sp
    d = np.sqrt(((ps[:, None, :] - gs[None, :, :]) ** 2).sum(-1))
    d_pg = d.min(1)  # pred surface -> gt surface
    d_gp = d.min(0)
    hd = max(d_pg.max(), d_gp.max())
    asd_val = (d_pg.sum() + d_gp.sum()) / (len(d_pg) + len(d_gp))
    return hd, asd_val


class TestDice:
    def test_identical(self):
        m = label((np.random.default_rng(0).random((4, 4, 4)) > 0.5).astype(float))
        assert dice_score(m, m) == 1.0

    def test_disjoint(self):
        assert dice_score(single((4, 4, 4), (0, 0, 0)), single((4, 4, 4), (3, 3, 3))) == 0.0

    def test_partial_overlap(self):
        pred = np.zeros((4, 4, 4))
        pred[0, 0, 0] = pred[0, 0, 1] = 1.0
        assert dice_score(label(pred), single((4, 4, 4), (0, 0, 0))) == pytest.approx(2 / 3)

    def test_both_empty_is_one(self):
        e = label(np.zeros((3, 3, 3)))
        assert dice_score(e, e) == 1.0


class TestSurfaceVoxels:
    def test_single_voxel(self):
        s = surface_voxels(single((3, 3, 3), (1, 1, 1)))
        assert s.sum() == 1 and s[1, 1, 1]

    def test_solid_cube_shell(self):
        data = np.zeros((5, 5, 5))
        data[1:4, 1:4, 1:4] = 1.0
        assert surface_voxels(label(data)).sum() == 26

    def test_empty(self):
        assert surface_voxels(label(np.zeros((3, 3, 3)))).sum() == 0

    def test_boundary_voxels_are_surface(self):
        # volume edge counts as background
        assert surface_voxels(label(np.ones((2, 2, 2)))).sum() == 8

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            mask = rng.random((6, 6, 6)) > 0.6
            got = surface_voxels(label(mask.astype(float)))
            assert set(map(tuple, np.argwhere(got))) == brute_surfaces(mask)


class TestDistances:
    def test_identical_masks_zero(self):
        m = label((np.random.default_rng(2).random((5, 5, 5)) > 0.5).astype(float))
        if not m.data.any():
            pytest.skip("degenerate draw")
        assert hausdorff(m, m) == 0.0
        assert asd(m, m) == 0.0

    def test_two_voxels_one_apart(self):
        a = single((4, 4, 4), (1, 1, 1))
        b = single((4, 4, 4), (2, 1, 1))
        assert hausdorff(a, b) == pytest.approx(1.0)
        assert asd(a, b) == pytest.approx(1.0)

    def test_anisotropic_spacing(self):
        a = single((4, 4, 4), (0, 0, 0))
        b = single((4, 4, 4), (0, 0, 1))
        a = label(a.data, (1.0, 1.0, 2.5))
        b = label(b.data, (1.0, 1.0, 2.5))
        assert hausdorff(a, b) == pytest.approx(2.5)

    def test_empty_mask_raises(self):
        m = single((3, 3, 3), (0, 0, 0))
        e = label(np.zeros((3, 3, 3)))
        with pytest.raises(ValueError):
            hausdorff(m, e)
        with pytest.raises(ValueError):
            asd(e, m)

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = label((rng.random((6, 6, 6)) > 0.7).astype(float))
            b = label((rng.random((6, 6, 6)) > 0.7).astype(float))
            if not (a.data.any() and b.data.any()):
                continue
            assert hausdorff(a, b) == pytest.approx(hausdorff(b, a))
            assert asd(a, b) == pytest.approx(asd(b, a))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        checked = 0
        while checked < 15:
            spacing = tuple(rng.uniform(0.5, 2.5, 3))
            a = label((rng.random((7, 7, 7)) > 0.75).astype(float), spacing)
            b = label((rng.random((7, 7, 7)) > 0.75).astype(float), spacing)
            if not (a.data.any() and b.data.any()):
                continue
            hd_want, asd_want = brute_metrics(a, b)
            assert hausdorff(a, b) == pytest.approx(hd_want, rel=1e-9)
            assert asd(a, b) == pytest.approx(asd_want, rel=1e-9)
            checked += 1

    def test_translation_equivariance(self):
        rng = np.random.default_rng(5)
        a = np.zeros((8, 8, 8))
        a[1:4, 1:4, 1:4] = rng.random((3, 3, 3)) > 0.4
        b = np.zeros((8, 8, 8))
        b[2:5, 1:4, 2:5] = rng.random((3, 3, 3)) > 0.4
        if not (a.any() and b.any()):
            pytest.skip("degenerate draw")
        la, lb = label(a), label(b)
        sa, sb = label(np.roll(a, 2, 0)), label(np.roll(b, 2, 0))
        assert hausdorff(sa, sb) == pytest.approx(hausdorff(la, lb))
        assert asd(sa, sb) == pytest.approx(asd(la, lb))
        assert dice_score(sa, sb) == pytest.approx(dice_score(la, lb))

    def test_hd95_leq_hd(self):
        rng = np.random.default_rng(6)
        a = label((rng.random((8, 8, 8)) > 0.6).astype(float))
        b = label((rng.random((8, 8, 8)) > 0.6).astype(float))
        assert hausdorff(a, b, percentile=95.0) <= hausdorff(a, b) + 1e-12


class TestEvaluatePair:
    def test_report_invariants(self):
        rng = np.random.default_rng(7)
        a = label((rng.random((6, 6, 6)) > 0.6).astype(float))
        b = label((rng.random((6, 6, 6)) > 0.6).astype(float))
        rep = evaluate_pair(a, b)
        assert 0.0 <= rep.dsc <= 1.0
        assert rep.hd_mm >= rep.asd_mm >= 0.0
        assert rep.pred_fg == int(a.data.sum())
        assert rep.gt_fg == int(b.data.sum())

    def test_perfect_pair(self):
        m = label((np.random.default_rng(8).random((5, 5, 5)) > 0.5).astype(float))
        rep = evaluate_pair(m, m)
        assert (rep.dsc, rep.hd_mm, rep.asd_mm) == (1.0, 0.0, 0.0)

    def test_empty_mask_yields_nan_distances(self):
        m = single((3, 3, 3), (1, 1, 1))
        rep = evaluate_pair(label(np.zeros((3, 3, 3))), m)
        assert rep.dsc == 0.0
        assert np.isnan(rep.hd_mm) and np.isnan(rep.asd_mm)
