"""Three-stage training orchestration, cross-validation, and ablations.

Stage I trains encoder + LA decoder on cavity segmentation; Stage II adds the
freshly initialized scar decoder with the wall-weighted dual-task loss and
cautious (0.1x) encoder/LA updates; Stage III fine-tunes scar with the early
encoder and LA decoder frozen. Early stopping watches the validation Dice of
the stage's primary structure. Everything is deterministic given (dataset,
seed, config).
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from progseg import anatomy, augment, loss as losses, metrics, phantom
from progseg.anatomy import AlphaSchedule, WallParams
from progseg.loss import LossConfig
from progseg.micronet import AdamW, MicroNet, set_stage_trainability
from progseg.volume import PatchSpec, Volume, crop_at, sample_patch_origin, zscore

logger = logging.getLogger(__name__)

STAGE_PRIMARY = {"I": "la", "II": "scar", "III": "scar"}

BASELINE_STAGES = {
    "B1": ["III"],
    "B2": ["I", "III"],
    "B3": ["II"],
    "B4": ["II", "III"],
    "Full": ["I", "II", "III"],
}


@dataclass(frozen=True)
class Case:
    case_id: str
    image: Volume
    la: Volume
    scar: Volume | None = None


@dataclass(frozen=True)
class StagePlan:
    stage: str = "I"
    max_epochs: int = 250
    patience: int = 30
    min_delta: float = 0.0001
    beta_la: float = 0.3
    beta_scar: float = 0.7
    alpha: AlphaSchedule = AlphaSchedule()
    wall: WallParams = WallParams()
    loss_config: LossConfig = LossConfig()
    lr: float = 1e-4
    weight_decay: float = 1e-2
    seed: int = 0
    patch_size: tuple[int, int, int] | None = None
    augment_pipeline: tuple | None = None  # None -> default table; () -> disabled
    threshold: float = 0.5
    stage3_weighted: bool = False  # re-apply the wall weighting in stage III


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    val_dsc_la: float
    val_dsc_scar: float
    alpha: float
    outside_frac: float
    improved: bool


@dataclass
class RunLog:
    records: list[EpochRecord] = field(default_factory=list)
    stages: list[dict] = field(default_factory=list)
    lineage: list[str] = field(default_factory=list)

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["stage", "epoch", "train_loss", "val_dsc_la", "val_dsc_scar", "alpha", "outside_frac", "improved"]
            )
            for r in self.records:
                w.writerow(
                    [r.stage, r.epoch, repr(r.train_loss), repr(r.val_dsc_la), repr(r.val_dsc_scar),
                     repr(r.alpha), repr(r.outside_frac), int(r.improved)]
                )


class EarlyStopping:
    """Stop after `patience` consecutive epochs without an improvement of at
    least `min_delta` over the best value seen so far."""

    def __init__(self, patience: int, min_delta: float):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if value - self.best >= self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


def _step_seed(base_seed: int, stage: str, epoch: int, index: int) -> int:
    seq = np.random.SeedSequence([base_seed, ord(stage[0]) + len(stage), epoch, index + 16])
    return int(seq.generate_state(1)[0])


def _safe_wall(la: Volume, params: WallParams) -> Volume | None:
    inside = la.data > 0
    if not inside.any() or inside.all():
        return None
    return anatomy.wall_mask(la, params)


def _binarize(prob: np.ndarray, spacing, threshold: float) -> Volume:
    return Volume((prob >= threshold).astype(np.float64), spacing, "label")


def _train_step(net: MicroNet, opt: AdamW, case: Case, plan: StagePlan, epoch: int, index: int) -> float:
    stage = plan.stage
    img = zscore(case.image)
    labels = [case.la] + ([case.scar] if case.scar is not None else [])
    seed = _step_seed(plan.seed, stage, epoch, index)
    pipeline = None if plan.augment_pipeline is None else list(plan.augment_pipeline)
    if pipeline is None or pipeline:
        img, labels = augment.apply_pipeline(img, labels, seed, pipeline)
    la = labels[0]
    scar = labels[1] if len(labels) > 1 else None

    weights = None
    if stage == "II" or (stage == "III" and plan.stage3_weighted):
        # wall prior always from ground-truth LA, never from predictions
        wall = _safe_wall(la, plan.wall)
        alpha = anatomy.alpha_at(plan.alpha, epoch - 1)
        if wall is None:
            weights = Volume(np.ones(la.dims), la.spacing, "weight")
        else:
            weights = anatomy.weight_map(wall, alpha)

    if plan.patch_size is not None and tuple(plan.patch_size) != img.dims:
        focus = scar if stage in ("II", "III") and scar is not None else la
        spec = PatchSpec(tuple(plan.patch_size), "centered-on-label")
        origin = sample_patch_origin(img.dims, spec, seed ^ 0x5BD1E995, focus)
        img = crop_at(img, origin, spec.size)
        la = crop_at(la, origin, spec.size)
        scar = crop_at(scar, origin, spec.size) if scar is not None else None
        weights = crop_at(weights, origin, spec.size) if weights is not None else None

    y_la, y_scar, cache = net.forward(img.data)
    zeros = np.zeros_like(y_la)
    if stage == "I":
        rep = losses.dice_ce_loss(y_la, la, plan.loss_config)
        net_grads = net.backward(cache, rep.grad, zeros)
        value = rep.value
    elif stage == "II":
        if scar is None:
            raise ValueError(f"case {case.case_id} has no scar label for stage II")
        rep = losses.stage2_loss(
            y_la, la, y_scar, scar, weights, plan.beta_la, plan.beta_scar, plan.loss_config
        )
        net_grads = net.backward(cache, plan.beta_la * rep.la.grad, plan.beta_scar * rep.scar.grad)
        value = rep.value
    else:
        if scar is None:
            raise ValueError(f"case {case.case_id} has no scar label for stage III")
        if plan.stage3_weighted:
            rep = losses.weighted_scar_loss(y_scar, scar, weights, plan.loss_config)
        else:
            rep = losses.dice_ce_loss(y_scar, scar, plan.loss_config)
        net_grads = net.backward(cache, zeros, rep.grad)
        value = rep.value
    opt.step(net.params, net_grads)
    return value


def _validate(net: MicroNet, cases: list[Case], plan: StagePlan, wall_cache: dict | None = None):
    """Returns (mean LA Dice, mean scar Dice, mean outside-wall fraction)."""
    dsc_la, dsc_scar, outside = [], [], []
    wall_cache = wall_cache if wall_cache is not None else {}
    for case in cases:
        y_la, y_scar, _ = net.forward(zscore(case.image).data)
        pred_la = _binarize(y_la, case.image.spacing, plan.threshold)
        dsc_la.append(metrics.dice_score(pred_la, case.la))
        if case.scar is not None:
            pred_scar = _binarize(y_scar, case.image.spacing, plan.threshold)
            dsc_scar.append(metrics.dice_score(pred_scar, case.scar))
            if case.case_id not in wall_cache:
                wall_cache[case.case_id] = _safe_wall(case.la, plan.wall)
            wall = wall_cache[case.case_id]
            if wall is not None:
                outside.append(anatomy.plausibility_audit(pred_scar, wall).outside_fraction)
    return (
        float(np.mean(dsc_la)) if dsc_la else float("nan"),
        float(np.mean(dsc_scar)) if dsc_scar else float("nan"),
        float(np.mean(outside)) if outside else float("nan"),
    )


def run_stage(
    net: MicroNet,
    train_cases: list[Case],
    val_cases: list[Case],
    plan: StagePlan,
    log: RunLog | None = None,
) -> RunLog:
    """Train one stage with early stopping; net is updated in place and left
    at the best-validation parameters."""
    if not train_cases:
        raise ValueError("empty training dataset")
    if plan.stage not in STAGE_PRIMARY:
        raise ValueError(f"unknown stage {plan.stage!r}")
    if plan.stage == "II":
        net.reinit_decoder("scar", _step_seed(plan.seed, "II", 0, -1))
    set_stage_trainability(net, plan.stage)
    opt = AdamW(lr=plan.lr, weight_decay=plan.weight_decay)
    stopper = EarlyStopping(plan.patience, plan.min_delta)
    log = log if log is not None else RunLog()
    order_rng = np.random.default_rng(_step_seed(plan.seed, plan.stage, 0, -2))
    best_params = copy.deepcopy(net.params)
    wall_cache: dict = {}
    primary = STAGE_PRIMARY[plan.stage]
    stop_epoch = plan.max_epochs
    for epoch in range(1, plan.max_epochs + 1):
        order = order_rng.permutation(len(train_cases))
        epoch_loss = 0.0
        for i, idx in enumerate(order):
            epoch_loss += _train_step(net, opt, train_cases[idx], plan, epoch, i)
        epoch_loss /= len(train_cases)
        v_la, v_scar, v_out = _validate(net, val_cases, plan, wall_cache) if val_cases else (float("nan"),) * 3
        alpha = anatomy.alpha_at(plan.alpha, epoch - 1) if plan.stage == "II" else 0.0
        monitored = v_la if primary == "la" else v_scar
        improved, stop = stopper.update(epoch, monitored if np.isfinite(monitored) else -np.inf)
        if improved:
            best_params = copy.deepcopy(net.params)
        log.records.append(
            EpochRecord(plan.stage, epoch, epoch_loss, v_la, v_scar, alpha, v_out, improved)
        )
        if stop:
            stop_epoch = epoch
            break
    if val_cases:
        net.params = best_params
    log.stages.append(
        {
            "stage": plan.stage,
            "stopped_epoch": stop_epoch,
            "best_epoch": stopper.best_epoch,
            "best_value": stopper.best,
            "beta_la": plan.beta_la,
            "beta_scar": plan.beta_scar,
        }
    )
    return log


def run_pipeline(
    stages: list[str],
    train_cases: list[Case],
    val_cases: list[Case],
    base_plan: StagePlan,
    net: MicroNet | None = None,
) -> tuple[MicroNet, RunLog]:
    """Run a sequence of stages on one network (e.g. ["I", "II", "III"])."""
    if net is None:
        net = MicroNet(seed=base_plan.seed)
    log = RunLog()
    for i, stage in enumerate(stages):
        plan = replace(base_plan, stage=stage)
        run_stage(net, train_cases, val_cases, plan, log)
        if i < len(stages) - 1:
            # ancestry of the parameters the *next* stage starts from; a
            # single-stage run from random init keeps an empty lineage
            log.lineage.append(stage)
    return net, log


def run_ablation(
    baseline: str,
    train_cases: list[Case],
    val_cases: list[Case],
    base_plan: StagePlan,
) -> tuple[MicroNet, RunLog]:
    """Train one ablation baseline (B1..B4 or Full)."""
    if baseline not in BASELINE_STAGES:
        raise ValueError(f"unknown baseline {baseline!r} (expected one of {sorted(BASELINE_STAGES)})")
    return run_pipeline(BASELINE_STAGES[baseline], train_cases, val_cases, base_plan)


def evaluate_cases(net: MicroNet, cases: list[Case], threshold: float = 0.5):
    """Per-case metric reports for LA and (when labeled) scar."""
    out = []
    for case in cases:
        y_la, y_scar, _ = net.forward(zscore(case.image).data)
        row = {"case_id": case.case_id}
        row["la"] = metrics.evaluate_pair(_binarize(y_la, case.image.spacing, threshold), case.la)
        if case.scar is not None:
            row["scar"] = metrics.evaluate_pair(
                _binarize(y_scar, case.image.spacing, threshold), case.scar
            )
        out.append(row)
    return out


def aggregate_metric(values: list[float]) -> tuple[float, float]:
    """Mean and population standard deviation, NaNs excluded."""
    arr = np.asarray([v for v in values if np.isfinite(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def crossval_folds(n_cases: int, k: int, seed: int) -> list[np.ndarray]:
    """Deterministic disjoint validation folds covering all cases."""
    if n_cases < k:
        raise ValueError(f"dataset of {n_cases} cases too small for {k} folds")
    perm = np.random.default_rng(seed).permutation(n_cases)
    return [np.sort(fold) for fold in np.array_split(perm, k)]


def run_crossval(
    cases: list[Case],
    stages: list[str],
    base_plan: StagePlan,
    k: int = 5,
):
    """k-fold cross-validation; returns (per-fold reports, aggregates)."""
    folds = crossval_folds(len(cases), k, base_plan.seed)
    fold_reports = []
    for fold_idx, val_idx in enumerate(folds):
        val_set = set(int(i) for i in val_idx)
        train = [c for i, c in enumerate(cases) if i not in val_set]
        val = [cases[int(i)] for i in val_idx]
        net, log = run_pipeline(stages, train, val, base_plan)
        fold_reports.append({"fold": fold_idx, "log": log, "reports": evaluate_cases(net, val, base_plan.threshold)})
    aggregates = {}
    for structure in ("la", "scar"):
        for metric_name in ("dsc", "hd_mm", "asd_mm"):
            values = [
                getattr(row[structure], metric_name)
                for fr in fold_reports
                for row in fr["reports"]
                if structure in row
            ]
            aggregates[f"{structure}_{metric_name}"] = aggregate_metric(values)
    return fold_reports, aggregates


# ---------------------------------------------------------------------------
# Reference phantom suite (desk-scale stand-in dataset)
# ---------------------------------------------------------------------------

REFERENCE_SPEC = phantom.PhantomSpec(
    dims=(20, 20, 12),
    spacing=(1.5, 1.5, 2.0),
    cavity_semi_axes_mm=(8.0, 7.0, 6.0),
    center_jitter_mm=2.0,
    scar_fraction=0.012,
    patch_count_range=(2, 4),
    patch_radius_mm=(2.0, 4.0),
    noise_std=0.03,
)


def make_reference_suite(
    n_train: int = 20,
    n_val: int = 5,
    seed: int = 0,
    spec: phantom.PhantomSpec = REFERENCE_SPEC,
) -> tuple[list[Case], list[Case]]:
    """Generate the deterministic train/held-out phantom suite."""
    cases = []
    for i in range(n_train + n_val):
        img, la, scar = phantom.generate(spec, seed * 10_007 + i)
        cases.append(Case(f"case{i:03d}", img, la, scar))
    return cases[:n_train], cases[n_train:]


def reference_plan(seed: int = 0, max_epochs: int = 6) -> StagePlan:
    """Desk-scale plan: shortened epochs/ramp and a faster lr than the
    full-scale defaults, everything else per the standard protocol."""
    return StagePlan(
        max_epochs=max_epochs,
        patience=max_epochs,  # no early exit in short phantom runs
        lr=3e-3,
        alpha=AlphaSchedule(alpha_max=2.0, ramp_epochs=2),
        seed=seed,
    )
