"""Command-line entry point.

One subcommand per module operation plus `overlay` for figure-style PNG
slices. Every command prints a line-oriented `key = value` summary on stdout
(mirrored to JSON with --json), is deterministic given flags + seed, and
writes output files atomically (temp file in the target directory, then
rename) so failed runs never leave partial artifacts.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np

from progseg import anatomy, augment, edt as edt_mod, loss as losses, metrics, phantom, trainer
from progseg.anatomy import AlphaSchedule, WallParams
from progseg.loss import LossConfig
from progseg.micronet import save_checkpoint
from progseg.volume import (
    INTENSITY,
    LABEL,
    WEIGHT,
    NiftiFormatError,
    NiftiUnsupportedError,
    Volume,
    center_crop_or_pad,
    read_nifti,
    resample,
    write_nifti,
    zscore,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class DataError(Exception):
    """Invalid or unreadable input data (exit code 2)."""


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------


def _read(path, kind=None) -> Volume:
    try:
        vol = read_nifti(path)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}")
    except (NiftiFormatError, NiftiUnsupportedError) as e:
        raise DataError(f"{path}: {e}")
    if kind is not None and vol.kind != kind:
        if kind == LABEL:
            data = vol.data
            if not np.isin(data, (0.0, 1.0)).all():
                raise DataError(f"{path}: expected a binary label volume")
            vol = Volume(data, vol.spacing, LABEL)
        else:
            vol = Volume(vol.data, vol.spacing, kind)
    return vol


def _atomic_write_nifti(vol: Volume, path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".nii.tmp")
    os.close(fd)
    try:
        write_nifti(vol, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _atomic_write_text(text: str, path):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _emit(summary: dict, json_path=None):
    for k, v in summary.items():
        print(f"{k} = {v}")
    if json_path:
        _atomic_write_text(json.dumps(summary, indent=2) + "\n", json_path)


def _triple(text, cast=float):
    parts = [cast(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _seed(args) -> int:
    env = os.environ.get("PROGSEG_SEED")
    return int(env) if env is not None else args.seed


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_preprocess(args):
    vol = _read(args.infile)
    if args.spacing is not None:
        vol = resample(vol, args.spacing)
    if args.dims is not None:
        vol = center_crop_or_pad(vol, args.dims)
    if args.zscore:
        if vol.kind != INTENSITY:
            raise DataError("z-score normalization only applies to intensity volumes")
        vol = zscore(vol)
    _atomic_write_nifti(vol, args.out)
    _emit(
        {"out": args.out, "dims": "x".join(map(str, vol.dims)),
         "spacing": ",".join(f"{s:g}" for s in vol.spacing), "kind": vol.kind},
        args.json,
    )
    return EXIT_OK


def _phantom_spec_from_config(path) -> phantom.PhantomSpec:
    spec = phantom.PhantomSpec()
    if path is None:
        return spec
    fields = {f for f in spec.__dataclass_fields__ if f != "wall"}
    overrides = {}
    wall = {}
    try:
        with open(path) as f:
            lines = list(f)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}")
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        parts = [float(v) for v in value.split(",")]
        if key in ("delta_in", "delta_out"):
            wall[key] = parts[0]
        elif key in fields:
            ftype = spec.__dataclass_fields__[key].type
            if "tuple" in str(ftype):
                overrides[key] = tuple(int(p) if p == int(p) and "int" in str(ftype) else p for p in parts)
            elif "int" in str(ftype):
                overrides[key] = int(parts[0])
            else:
                overrides[key] = parts[0]
        else:
            raise DataError(f"{path}:{lineno}: unknown field {key!r}")
    if wall:
        overrides["wall"] = WallParams(**{**{"delta_in": 3.0, "delta_out": 2.5}, **wall})
    try:
        return replace(spec, **overrides)
    except (TypeError, ValueError) as e:
        raise DataError(f"{path}: {e}")


def cmd_phantom(args):
    spec = _phantom_spec_from_config(args.spec)
    seed = _seed(args)
    try:
        image, la, scar = phantom.generate(spec, seed)
    except ValueError as e:
        raise DataError(str(e))
    os.makedirs(args.out_dir, exist_ok=True)
    for name, vol in (("image", image), ("la", la), ("scar", scar)):
        _atomic_write_nifti(vol, os.path.join(args.out_dir, f"{name}.nii"))
    _emit(
        {"out_dir": args.out_dir, "seed": seed, "dims": "x".join(map(str, image.dims)),
         "scar_voxels": int(scar.data.sum()), "la_voxels": int(la.data.sum())},
        args.json,
    )
    return EXIT_OK


def cmd_augment(args):
    img = _read(args.infile, INTENSITY)
    label_paths = args.labels.split(",") if args.labels else []
    labels = [_read(p, LABEL) for p in label_paths]
    pipeline = augment.load_pipeline_config(args.config) if args.config else None
    seed = _seed(args)
    try:
        out_img, out_labels = augment.apply_pipeline(img, labels, seed, pipeline)
    except ValueError as e:
        raise DataError(str(e))
    out_paths = {"image": args.out_prefix + "image.nii"}
    _atomic_write_nifti(out_img, out_paths["image"])
    for path, vol in zip(label_paths, out_labels):
        out = args.out_prefix + os.path.basename(path)
        out_paths[os.path.basename(path)] = out
        _atomic_write_nifti(vol, out)
    applied = [kind for kind, _ in augment.plan_pipeline(
        pipeline if pipeline is not None else augment.default_pipeline(), seed)]
    _emit({"seed": seed, "applied": ",".join(applied) or "none",
           **{f"out_{k}": v for k, v in out_paths.items()}}, args.json)
    return EXIT_OK


def cmd_edt(args):
    mask = _read(args.infile, LABEL)
    source = {"fg": "distance-to-foreground", "bg": "distance-to-background"}[args.source]
    try:
        field = edt_mod.edt(mask, source)
    except ValueError as e:
        raise DataError(str(e))
    _atomic_write_nifti(Volume(field.data, mask.spacing, INTENSITY), args.out)
    _emit({"out": args.out, "source": source, "max_mm": f"{field.data.max():.6g}"}, args.json)
    return EXIT_OK


def cmd_wallmask(args):
    la = _read(args.la, LABEL)
    params = WallParams(delta_in=args.din, delta_out=args.dout)
    try:
        wall = anatomy.wall_mask(la, params)
    except ValueError as e:
        raise DataError(str(e))
    _atomic_write_nifti(wall, args.out)
    _emit({"out": args.out, "delta_in": args.din, "delta_out": args.dout,
           "wall_voxels": int(wall.data.sum())}, args.json)
    return EXIT_OK


def cmd_audit(args):
    scar = _read(args.scar, LABEL)
    wall = _read(args.wall, LABEL)
    try:
        report = anatomy.plausibility_audit(scar, wall)
    except ValueError as e:
        raise DataError(str(e))
    _emit({"outside_count": report.outside_count,
           "outside_fraction": f"{report.outside_fraction:.6g}"}, args.json)
    return EXIT_OK


def cmd_loss(args):
    pred = _read(args.pred)
    gt = _read(args.gt, LABEL)
    config = LossConfig(
        weight_mode="per-voxel-normalized" if args.mode == "normalized" else "literal-eq8"
    )
    try:
        if args.weights:
            weights = Volume(_read(args.weights).data, gt.spacing, WEIGHT)
            report = losses.weighted_scar_loss(pred.data, gt, weights, config)
        else:
            report = losses.dice_ce_loss(pred.data, gt, config)
    except ValueError as e:
        raise DataError(str(e))
    _emit({"loss": f"{report.value:.12g}", "mode": args.mode,
           "weighted": bool(args.weights)}, args.json)
    return EXIT_OK


def cmd_evaluate(args):
    pred = _read(args.pred, LABEL)
    gt = _read(args.gt, LABEL)
    try:
        report = metrics.evaluate_pair(pred, gt)
    except ValueError as e:
        raise DataError(str(e))
    row = {"case_id": args.case_id, "structure": args.structure,
           "dsc": report.dsc, "hd_mm": report.hd_mm, "asd_mm": report.asd_mm}
    if args.csv:
        lines = ["case_id,structure,dsc,hd_mm,asd_mm",
                 f"{row['case_id']},{row['structure']},{row['dsc']:.6g},{row['hd_mm']:.6g},{row['asd_mm']:.6g}"]
        _atomic_write_text("\n".join(lines) + "\n", args.csv)
    _emit({**{k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()},
           **({"csv": args.csv} if args.csv else {})}, args.json)
    return EXIT_OK


def _load_cases(data_dir) -> list[trainer.Case]:
    if not os.path.isdir(data_dir):
        raise DataError(f"no such directory: {data_dir}")
    cases = []
    for name in sorted(os.listdir(data_dir)):
        case_dir = os.path.join(data_dir, name)
        img_path = os.path.join(case_dir, "image.nii")
        if not os.path.isfile(img_path):
            continue
        image = _read(img_path, INTENSITY)
        la = _read(os.path.join(case_dir, "la.nii"), LABEL)
        scar_path = os.path.join(case_dir, "scar.nii")
        scar = _read(scar_path, LABEL) if os.path.isfile(scar_path) else None
        cases.append(trainer.Case(name, image, la, scar))
    if not cases:
        raise DataError(f"no cases found under {data_dir} (expected <case>/image.nii)")
    return cases


def _plan_from_args(args, seed) -> trainer.StagePlan:
    return trainer.StagePlan(
        max_epochs=args.max_epochs,
        patience=args.patience,
        lr=args.lr,
        alpha=AlphaSchedule(alpha_max=args.alpha_max, ramp_epochs=args.alpha_ramp),
        seed=seed,
        patch_size=args.patch_size,
        augment_pipeline=() if args.no_augment else None,
    )


def _run_training(stages, args):
    cases = _load_cases(args.data)
    n_val = args.val_cases if args.val_cases is not None else max(1, len(cases) // 5)
    if n_val >= len(cases):
        raise DataError(f"cannot hold out {n_val} of {len(cases)} cases for validation")
    train_cases, val_cases = cases[:-n_val], cases[-n_val:]
    seed = _seed(args)
    plan = _plan_from_args(args, seed)
    net, log = trainer.run_pipeline(stages, train_cases, val_cases, plan)

    os.makedirs(args.out_dir, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=args.out_dir, suffix=".tmp")
    os.close(fd)
    log.write_csv(tmp)
    os.replace(tmp, os.path.join(args.out_dir, "runlog.csv"))

    ckpt_dir = os.path.join(args.out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    save_checkpoint(os.path.join(ckpt_dir, "final.npz"), net)

    reports = trainer.evaluate_cases(net, val_cases)
    rows = []
    for row in reports:
        for structure in ("la", "scar"):
            if structure in row:
                r = row[structure]
                rows.append(f"{row['case_id']},{structure},{r.dsc:.6g},{r.hd_mm:.6g},{r.asd_mm:.6g}")
    _atomic_write_text("case_id,structure,dsc,hd_mm,asd_mm\n" + "\n".join(rows) + "\n",
                       os.path.join(args.out_dir, "metrics.csv"))

    outside = []
    for case in val_cases:
        wall = trainer._safe_wall(case.la, plan.wall)
        if wall is None or case.scar is None:
            continue
        y_la, y_scar, _ = net.forward(zscore(case.image).data)
        pred = Volume((y_scar >= plan.threshold).astype(np.float64), case.image.spacing, LABEL)
        rep = anatomy.plausibility_audit(pred, wall)
        outside.append({"case_id": case.case_id, "outside_count": rep.outside_count,
                        "outside_fraction": rep.outside_fraction})
    _atomic_write_text(json.dumps({"cases": outside}, indent=2) + "\n",
                       os.path.join(args.out_dir, "audit.json"))

    scar_dsc = [r.split(",")[2] for r in rows if ",scar," in f",{r.split(',')[1]},"]
    summary = {
        "out_dir": args.out_dir,
        "stages": ",".join(stages),
        "seed": seed,
        "epochs": len(log.records),
        "val_cases": n_val,
    }
    for s in log.stages:
        summary[f"stage_{s['stage']}_best"] = f"{s['best_value']:.6g}"
    if scar_dsc:
        summary["val_scar_dsc_mean"] = f"{np.mean([float(v) for v in scar_dsc]):.6g}"
    _emit(summary, args.json)
    return EXIT_OK


def cmd_train(args):
    stages = [s.strip() for s in args.stages.split(",") if s.strip()]
    for s in stages:
        if s not in trainer.STAGE_PRIMARY:
            raise DataError(f"unknown stage {s!r} (expected I, II, III)")
    return _run_training(stages, args)


def cmd_ablate(args):
    if args.baseline == "nnunet-external":
        if not args.report:
            raise DataError("nnunet-external requires --report with precomputed metrics")
        try:
            with open(args.report) as f:
                payload = json.load(f)
        except FileNotFoundError:
            raise DataError(f"no such file: {args.report}")
        except json.JSONDecodeError as e:
            raise DataError(f"{args.report}: {e}")
        _emit({"baseline": args.baseline, **{k: payload[k] for k in sorted(payload)}}, args.json)
        return EXIT_OK
    if args.baseline not in trainer.BASELINE_STAGES:
        raise DataError(f"unknown baseline {args.baseline!r}")
    return _run_training(trainer.BASELINE_STAGES[args.baseline], args)


def cmd_overlay(args):
    from PIL import Image

    image = _read(args.image, INTENSITY)
    la = _read(args.la, LABEL)
    scar = _read(args.scar, LABEL) if args.scar else None
    for v in (la,) + ((scar,) if scar is not None else ()):
        if not v.same_grid(image):
            raise DataError("overlay volumes must share the image grid")
    data = image.data
    lo, hi = np.percentile(data, 1), np.percentile(data, 99)
    gray = np.clip((data - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    zs = range(image.dims[2]) if args.slices is None else [int(z) for z in args.slices.split(",")]
    written = []
    for z in zs:
        if not 0 <= z < image.dims[2]:
            raise DataError(f"slice {z} out of range [0, {image.dims[2]})")
        rgb = np.repeat((gray[:, :, z] * 255).astype(np.uint8)[:, :, None], 3, axis=2)
        la_sl = la.data[:, :, z] > 0
        interior = np.zeros_like(la_sl)
        interior[1:-1, 1:-1] = (
            la_sl[1:-1, 1:-1] & la_sl[:-2, 1:-1] & la_sl[2:, 1:-1] & la_sl[1:-1, :-2] & la_sl[1:-1, 2:]
        )
        contour = la_sl & ~interior
        rgb[contour] = (0, 255, 0)
        if scar is not None:
            rgb[scar.data[:, :, z] > 0] = (255, 0, 0)
        img = Image.fromarray(np.transpose(rgb, (1, 0, 2)), "RGB")
        if args.scale != 1:
            img = img.resize((img.width * args.scale, img.height * args.scale), Image.NEAREST)
        out = f"{args.out_prefix}z{z:03d}.png"
        d = os.path.dirname(os.path.abspath(out))
        os.makedirs(d, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".png")
        os.close(fd)
        img.save(tmp, format="PNG")
        os.replace(tmp, out)
        written.append(out)
    _emit({"slices": len(written), "first": written[0], "last": written[-1]}, args.json)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser / dispatch
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with 2 by default; usage errors are exit code 1 here
        self.print_usage(sys.stderr)
        raise SystemExit_Usage(message)


class SystemExit_Usage(Exception):
    pass


def _add_common(p, seed=True):
    if seed:
        p.add_argument("--seed", type=int, default=0,
                       help="random seed (PROGSEG_SEED env var overrides)")
    p.add_argument("--json", metavar="PATH", default=None,
                   help="also write the summary as JSON to PATH")


def _add_training_flags(p):
    p.add_argument("--data", required=True, help="directory of <case>/image.nii,la.nii[,scar.nii]")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--max-epochs", type=int, default=250, help="maximum epochs per stage (default 250)")
    p.add_argument("--patience", type=int, default=30, help="early-stopping patience (default 30)")
    p.add_argument("--lr", type=float, default=1e-4, help="AdamW learning rate (default 1e-4)")
    p.add_argument("--alpha-max", type=float, default=1.0, help="wall weight ceiling (default 1.0)")
    p.add_argument("--alpha-ramp", type=int, default=50, help="epochs to reach alpha-max (default 50)")
    p.add_argument("--patch-size", type=lambda s: _triple(s, int), default=None,
                   help="training patch dims, e.g. 16,16,8 (default: whole volume)")
    p.add_argument("--val-cases", type=int, default=None,
                   help="held-out validation cases (default: 20%% of the data)")
    p.add_argument("--no-augment", action="store_true", help="disable the augmentation pipeline")
    _add_common(p)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="progseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("preprocess", help="resample / crop-pad / z-score a volume")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=_triple, default=None, help="target spacing mm, e.g. 0.625,0.625,2.5")
    p.add_argument("--dims", type=lambda s: _triple(s, int), default=None, help="target dims, e.g. 96,96,24")
    p.add_argument("--zscore", action="store_true", help="z-score normalize intensities")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("phantom", help="generate a procedural phantom case")
    p.add_argument("--spec", default=None, help="key = value config overriding phantom defaults")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("augment", help="apply the stochastic augmentation pipeline")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--labels", default=None, help="comma-separated label volumes")
    p.add_argument("--config", default=None, help="pipeline overrides (kind.field = value)")
    p.add_argument("--out-prefix", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("edt", help="exact Euclidean distance transform (mm)")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source", choices=("fg", "bg"), default="fg",
                   help="distance to foreground (fg) or background (bg)")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_edt)

    p = sub.add_parser("wallmask", help="wall band mask from an LA cavity label")
    p.add_argument("--la", required=True)
    p.add_argument("--din", type=float, default=3.0, help="inward band depth mm (default 3.0)")
    p.add_argument("--dout", type=float, default=2.5, help="outward band depth mm (default 2.5)")
    p.add_argument("--out", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_wallmask)

    p = sub.add_parser("audit", help="count scar voxels outside the wall band")
    p.add_argument("--scar", required=True)
    p.add_argument("--wall", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("loss", help="evaluate the (weighted) DiceCE loss")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--weights", default=None)
    p.add_argument("--mode", choices=("normalized", "literal"), default="normalized")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("evaluate", help="Dice / Hausdorff / ASD between two masks")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--csv", default=None)
    p.add_argument("--case-id", default="case000")
    p.add_argument("--structure", default="scar")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train", help="run the staged training pipeline")
    p.add_argument("--stages", required=True, help="comma-separated stages, e.g. I,II,III")
    _add_training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run an ablation baseline (B1-B4, Full)")
    p.add_argument("--baseline", required=True,
                   help="B1 | B2 | B3 | B4 | Full | nnunet-external")
    p.add_argument("--report", default=None, help="metrics JSON for nnunet-external")
    _add_training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("overlay", help="axial PNG slices: LA contour green, scar fill red")
    p.add_argument("--image", required=True)
    p.add_argument("--la", required=True)
    p.add_argument("--scar", default=None)
    p.add_argument("--slices", default=None, help="comma-separated z indices (default: all)")
    p.add_argument("--scale", type=int, default=4, help="nearest-neighbor upscale factor (default 4)")
    p.add_argument("--out-prefix", required=True)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_overlay)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit_Usage as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 — boundary: anything else is a runtime failure
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    raise SystemExit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
