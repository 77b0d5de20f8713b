"""Command-line interface contracts: exit codes, outputs, determinism."""

import json
import os

import numpy as np
import pytest

from progseg.cli import dispatch
from progseg.volume import LABEL, Volume, read_nifti, write_nifti

SMALL_SPEC = """
dims = 20, 20, 12
spacing = 1.5, 1.5, 2.0
cavity_semi_axes_mm = 8, 7, 6
center_jitter_mm = 2
scar_fraction = 0.012
patch_count_range = 2, 4
patch_radius_mm = 2, 4
"""


@pytest.fixture()
def case_dir(tmp_path):
    spec = tmp_path / "spec.cfg"
    spec.write_text(SMALL_SPEC)
    out = tmp_path / "case000"
    code = dispatch(["phantom", "--spec", str(spec), "--seed", "3", "--out-dir", str(out)])
    assert code == 0
    return out


def test_unknown_subcommand_usage_error(capsys):
    assert dispatch(["bogus"]) == 1


def test_unknown_flag_writes_nothing(tmp_path):
    out = tmp_path / "x.nii"
    code = dispatch(["edt", "--in", "whatever.nii", "--out", str(out), "--frobnicate"])
    assert code == 1
    assert not out.exists()


def test_missing_file_is_data_error(tmp_path, capsys):
    code = dispatch(["evaluate", "--pred", str(tmp_path / "a.nii"), "--gt", str(tmp_path / "b.nii")])
    assert code == 2


def test_phantom_writes_three_volumes(case_dir):
    for name in ("image.nii", "la.nii", "scar.nii"):
        assert (case_dir / name).exists()
    la = read_nifti(case_dir / "la.nii")
    assert la.kind == LABEL
    assert la.dims == (20, 20, 12)


def test_phantom_seed_determinism(tmp_path, case_dir):
    spec = tmp_path / "spec.cfg"
    again = tmp_path / "again"
    code = dispatch(["phantom", "--spec", str(spec), "--seed", "3", "--out-dir", str(again)])
    assert code == 0
    assert (again / "image.nii").read_bytes() == (case_dir / "image.nii").read_bytes()


def test_seed_env_override(tmp_path, case_dir, monkeypatch):
    spec = tmp_path / "spec.cfg"
    other = tmp_path / "other"
    monkeypatch.setenv("PROGSEG_SEED", "99")
    code = dispatch(["phantom", "--spec", str(spec), "--seed", "3", "--out-dir", str(other)])
    assert code == 0
    assert (other / "image.nii").read_bytes() != (case_dir / "image.nii").read_bytes()


def test_evaluate_identical_masks(case_dir, tmp_path, capsys):
    csv_path = tmp_path / "m.csv"
    code = dispatch(["evaluate", "--pred", str(case_dir / "scar.nii"),
                     "--gt", str(case_dir / "scar.nii"), "--csv", str(csv_path)])
    assert code == 0
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "case_id,structure,dsc,hd_mm,asd_mm"
    case_id, structure, dsc, hd, asd_v = lines[1].split(",")
    assert float(dsc) == 1.0 and float(hd) == 0.0 and float(asd_v) == 0.0


def test_wallmask_audit_pipeline(case_dir, tmp_path, capsys):
    wall = tmp_path / "wall.nii"
    assert dispatch(["wallmask", "--la", str(case_dir / "la.nii"), "--out", str(wall)]) == 0
    report = tmp_path / "audit.json"
    assert dispatch(["audit", "--scar", str(case_dir / "scar.nii"),
                     "--wall", str(wall), "--json", str(report)]) == 0
    payload = json.loads(report.read_text())
    assert payload["outside_count"] == 0  # generator confines scar to the wall


def test_edt_output(case_dir, tmp_path):
    out = tmp_path / "dist.nii"
    assert dispatch(["edt", "--in", str(case_dir / "la.nii"), "--out", str(out),
                     "--source", "bg"]) == 0
    dist = read_nifti(out)
    la = read_nifti(case_dir / "la.nii")
    assert (dist.data[la.data == 0] == 0).all()


def test_loss_json_summary(case_dir, tmp_path, capsys):
    out = tmp_path / "loss.json"
    code = dispatch(["loss", "--pred", str(case_dir / "scar.nii"),
                     "--gt", str(case_dir / "scar.nii"), "--json", str(out)])
    assert code == 0
    assert float(json.loads(out.read_text())["loss"]) < 1e-5


def test_augment_deterministic(case_dir, tmp_path):
    for prefix in ("a_", "b_"):
        code = dispatch(["augment", "--in", str(case_dir / "image.nii"),
                         "--labels", str(case_dir / "la.nii"),
                         "--seed", "7", "--out-prefix", str(tmp_path / prefix)])
        assert code == 0
    assert (tmp_path / "a_image.nii").read_bytes() == (tmp_path / "b_image.nii").read_bytes()


def test_preprocess_zscore(case_dir, tmp_path):
    out = tmp_path / "prep.nii"
    code = dispatch(["preprocess", "--in", str(case_dir / "image.nii"),
                     "--out", str(out), "--zscore"])
    assert code == 0
    v = read_nifti(out)
    assert abs(v.data.mean()) < 1e-5  # float32 storage tolerance


def test_overlay_writes_png(case_dir, tmp_path):
    code = dispatch(["overlay", "--image", str(case_dir / "image.nii"),
                     "--la", str(case_dir / "la.nii"), "--scar", str(case_dir / "scar.nii"),
                     "--slices", "6", "--out-prefix", str(tmp_path / "ov_")])
    assert code == 0
    png = tmp_path / "ov_z006.png"
    assert png.exists()
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_overlay_slice_out_of_range(case_dir, tmp_path):
    code = dispatch(["overlay", "--image", str(case_dir / "image.nii"),
                     "--la", str(case_dir / "la.nii"),
                     "--slices", "99", "--out-prefix", str(tmp_path / "ov_")])
    assert code == 2


def test_train_writes_artifacts(case_dir, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    spec = case_dir.parent / "spec.cfg"
    for i in range(3):
        assert dispatch(["phantom", "--spec", str(spec), "--seed", str(10 + i),
                         "--out-dir", str(data / f"case{i:03d}")]) == 0
    out = tmp_path / "run"
    code = dispatch(["train", "--stages", "I", "--data", str(data), "--out-dir", str(out),
                     "--max-epochs", "1", "--lr", "0.001", "--no-augment", "--seed", "0"])
    assert code == 0
    assert (out / "runlog.csv").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "audit.json").exists()
    assert (out / "checkpoints" / "final.npz").exists()


def test_train_bad_stage_is_data_error(tmp_path):
    code = dispatch(["train", "--stages", "IX", "--data", str(tmp_path),
                     "--out-dir", str(tmp_path / "o"), "--seed", "0"])
    assert code == 2


def test_ablate_external_report_stub(tmp_path, capsys):
    report = tmp_path / "nnunet.json"
    report.write_text(json.dumps({"scar_dsc": 0.55}))
    code = dispatch(["ablate", "--baseline", "nnunet-external", "--report", str(report),
                     "--data", str(tmp_path), "--out-dir", str(tmp_path / "o"), "--seed", "0"])
    assert code == 0
    assert "scar_dsc = 0.55" in capsys.readouterr().out
