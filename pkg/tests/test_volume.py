"""Volume type, NIfTI-1 subset I/O, and preprocessing operations."""

import struct

import numpy as np
import pytest

from progseg.volume import (
    INTENSITY,
    LABEL,
    WEIGHT,
    NiftiFormatError,
    NiftiUnsupportedError,
    PatchSpec,
    Volume,
    center_crop_or_pad,
    extract_patch,
    read_nifti,
    resample,
    write_nifti,
    zscore,
)


def vol(data, spacing=(1.0, 1.0, 1.0), kind=INTENSITY):
    return Volume(np.asarray(data, dtype=np.float64), spacing, kind)


class TestVolumeInvariants:
    def test_rejects_non_3d(self):
        with pytest.raises(ValueError, match="3D"):
            Volume(np.zeros((2, 2)), (1, 1, 1))

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError, match="spacing"):
            Volume(np.zeros((2, 2, 2)), (1, 0, 1))

    def test_label_must_be_binary(self):
        with pytest.raises(ValueError, match="label"):
            Volume(np.full((2, 2, 2), 0.5), (1, 1, 1), LABEL)

    def test_weight_must_be_ge_one(self):
        with pytest.raises(ValueError, match="weight"):
            Volume(np.full((2, 2, 2), 0.5), (1, 1, 1), WEIGHT)

    def test_data_is_immutable(self):
        v = vol(np.zeros((2, 2, 2)))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_does_not_alias_caller_array(self):
        arr = np.zeros((2, 2, 2))
        Volume(arr, (1, 1, 1))
        arr[0, 0, 0] = 5.0  # caller's array must stay writable


class TestNiftiIO:
    def test_round_trip_small_float(self, tmp_path):
        v = vol(np.random.default_rng(0).normal(size=(2, 2, 2)).astype(np.float32))
        path = tmp_path / "x.nii"
        write_nifti(v, path)
        back = read_nifti(path)
        assert back.dims == (2, 2, 2)
        assert back.spacing == (1.0, 1.0, 1.0)
        np.testing.assert_array_equal(back.data, v.data)  # float32 in, bit-exact

    def test_round_trip_spacing(self, tmp_path):
        v = vol(np.zeros((4, 3, 2)), spacing=(0.625, 0.625, 2.5))
        path = tmp_path / "x.nii"
        write_nifti(v, path)
        back = read_nifti(path)
        assert back.spacing == pytest.approx((0.625, 0.625, 2.5))

    def test_label_stored_as_uint8(self, tmp_path):
        v = vol([[[0, 1], [1, 0]], [[1, 1], [0, 0]]], kind=LABEL)
        path = tmp_path / "lab.nii"
        write_nifti(v, path)
        raw = path.read_bytes()
        datatype = struct.unpack_from("<h", raw, 70)[0]
        assert datatype == 2  # uint8
        back = read_nifti(path)
        assert back.kind == LABEL
        np.testing.assert_array_equal(back.data, v.data)

    def test_weight_stored_as_float32(self, tmp_path):
        v = vol(np.full((2, 2, 2), 1.5), kind=WEIGHT)
        path = tmp_path / "w.nii"
        write_nifti(v, path)
        datatype = struct.unpack_from("<h", path.read_bytes(), 70)[0]
        assert datatype == 16  # float32

    def test_two_file_magic_rejected(self, tmp_path):
        v = vol(np.zeros((2, 2, 2)))
        path = tmp_path / "x.nii"
        write_nifti(v, path)
        raw = bytearray(path.read_bytes())
        raw[344:348] = b"ni1\x00"
        path.write_bytes(bytes(raw))
        with pytest.raises(NiftiUnsupportedError, match="ni1"):
            read_nifti(path)

    def test_bad_sizeof_hdr_names_offset(self, tmp_path):
        path = tmp_path / "bad.nii"
        path.write_bytes(b"\x00" * 400)
        with pytest.raises(NiftiFormatError, match="offset 0"):
            read_nifti(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "short.nii"
        path.write_bytes(b"\x00" * 100)
        with pytest.raises(NiftiFormatError, match="too short"):
            read_nifti(path)

    def test_unsupported_datatype_names_code(self, tmp_path):
        v = vol(np.zeros((2, 2, 2)))
        path = tmp_path / "x.nii"
        write_nifti(v, path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<h", raw, 70, 64)  # float64: outside the subset
        path.write_bytes(bytes(raw))
        with pytest.raises(NiftiUnsupportedError, match="64"):
            read_nifti(path)

    def test_scl_rescale_applied(self, tmp_path):
        v = vol(np.ones((2, 2, 2)))
        path = tmp_path / "x.nii"
        write_nifti(v, path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<2f", raw, 112, 2.0, 0.5)
        path.write_bytes(bytes(raw))
        np.testing.assert_allclose(read_nifti(path).data, 2.5)

    def test_int16_payload(self, tmp_path):
        v = vol(np.zeros((2, 2, 2)))
        path = tmp_path / "x.nii"
        write_nifti(v, path)
        raw = bytearray(path.read_bytes())
        struct.pack_into("<h", raw, 70, 4)  # int16
        payload = np.arange(8, dtype="<i2").tobytes()
        path.write_bytes(bytes(raw[:352]) + payload)
        back = read_nifti(path)
        np.testing.assert_array_equal(np.sort(back.data.ravel()), np.arange(8))


class TestResample:
    def test_identity(self):
        v = vol(np.random.default_rng(1).normal(size=(4, 4, 4)))
        assert resample(v, (1, 1, 1)) is v

    def test_dimension_arithmetic(self):
        v = vol(np.zeros((4, 4, 4)))
        assert resample(v, (2, 2, 2)).dims == (2, 2, 2)

    def test_constant_stays_constant(self):
        v = vol(np.full((8, 8, 8), 3.25))
        out = resample(v, (0.625, 0.625, 2.5))
        assert np.abs(out.data - 3.25).max() < 1e-6

    def test_label_stays_binary(self):
        rng = np.random.default_rng(2)
        v = vol((rng.random((6, 6, 6)) > 0.5).astype(float), kind=LABEL)
        out = resample(v, (0.7, 1.3, 0.9))
        assert np.isin(out.data, (0.0, 1.0)).all()

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            resample(vol(np.zeros((2, 2, 2))), (1, -1, 1))


class TestCropPad:
    def test_identity(self):
        v = vol(np.random.default_rng(0).normal(size=(4, 4, 4)))
        np.testing.assert_array_equal(center_crop_or_pad(v, (4, 4, 4)).data, v.data)

    def test_crop_removes_border(self):
        data = np.zeros((6, 6, 6))
        data[1:5, 1:5, 1:5] = 1.0
        out = center_crop_or_pad(vol(data), (4, 4, 4))
        np.testing.assert_array_equal(out.data, np.ones((4, 4, 4)))

    def test_pad_preserves_sum(self):
        v = vol(np.random.default_rng(3).random((2, 2, 2)))
        out = center_crop_or_pad(v, (4, 4, 4))
        assert out.dims == (4, 4, 4)
        assert out.data.sum() == pytest.approx(v.data.sum())

    def test_mixed_crop_and_pad(self):
        v = vol(np.ones((6, 2, 4)))
        out = center_crop_or_pad(v, (4, 4, 4))
        assert out.dims == (4, 4, 4)


class TestZscore:
    def test_two_values(self):
        data = np.zeros((2, 1, 1))
        data[1] = 2.0
        out = zscore(vol(data))
        np.testing.assert_allclose(np.sort(out.data.ravel()), [-1.0, 1.0])

    def test_constant_maps_to_zero(self):
        out = zscore(vol(np.full((3, 3, 3), 7.0)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_random_volume_standardized(self):
        v = vol(np.random.default_rng(4).normal(2.0, 3.0, (8, 8, 8)))
        out = zscore(v)
        assert abs(out.data.mean()) < 1e-6
        assert abs(out.data.std() - 1.0) < 1e-6

    def test_idempotent(self):
        v = vol(np.random.default_rng(5).normal(size=(6, 6, 6)))
        once = zscore(v)
        twice = zscore(once)
        assert np.abs(twice.data - once.data).max() < 1e-6

    def test_rejects_labels(self):
        with pytest.raises(ValueError):
            zscore(vol(np.zeros((2, 2, 2)), kind=LABEL))


class TestPatch:
    def test_fixed_whole_volume(self):
        v = vol(np.random.default_rng(0).normal(size=(4, 4, 4)))
        spec = PatchSpec((4, 4, 4), "fixed", (0, 0, 0))
        np.testing.assert_array_equal(extract_patch(v, spec, 0).data, v.data)

    def test_centered_on_single_voxel(self):
        label = np.zeros((8, 8, 8))
        label[4, 4, 4] = 1.0
        lv = vol(label, kind=LABEL)
        v = vol(np.arange(512, dtype=float).reshape(8, 8, 8))
        patch = extract_patch(v, PatchSpec((3, 3, 3), "centered-on-label"), 0, lv)
        assert patch.data[1, 1, 1] == v.data[4, 4, 4]

    def test_deterministic(self):
        v = vol(np.random.default_rng(1).normal(size=(8, 8, 8)))
        spec = PatchSpec((4, 4, 4), "random")
        a = extract_patch(v, spec, 42)
        b = extract_patch(v, spec, 42)
        np.testing.assert_array_equal(a.data, b.data)

    def test_empty_label_falls_back_to_random(self, caplog):
        v = vol(np.random.default_rng(2).normal(size=(8, 8, 8)))
        empty = vol(np.zeros((8, 8, 8)), kind=LABEL)
        patch = extract_patch(v, PatchSpec((4, 4, 4), "centered-on-label"), 7, empty)
        assert patch.dims == (4, 4, 4)

    def test_patch_must_fit(self):
        v = vol(np.zeros((4, 4, 4)))
        with pytest.raises(ValueError, match="fit"):
            extract_patch(v, PatchSpec((5, 4, 4), "random"), 0)
