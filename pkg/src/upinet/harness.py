"""Nested subject-level cross-validation: fold planning, the training
loop with early stopping, the iterative hyper-parameter search, and
fold-statistics reporting.

Folds are independent and may run in parallel worker processes; within a
fold training is sequential and every random draw comes from explicit
seeded generators, so a whole cross-validation run is a pure function of
(dataset, plan, spec, config).
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .data import ImageSample, center_crop, normalize, random_crop
from .evaluation import (EvalSummary, default_thresholds, default_tolerance,
                         ods_ois, pr_curve, write_results_csv)
from .losses import predict, total_loss
from .models import ArchitectureSpec, ContourNet, build_model, count_params, save_checkpoint

log = logging.getLogger("upinet")

PLACEMENT_GRID = ((5, 0), (4, 1), (3, 2), (2, 3), (1, 4), (0, 5))
GROUPS_GRID = (4, 8, 16, 32)
FUSION_GRID = (8, 16, 32, 64)


class LeakError(RuntimeError):
    """A subject appears in more than one role of a fold, or test data
    would reach training/tuning."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending optimizer step."""

    def __init__(self, step: int, epoch: int):
        super().__init__(f"non-finite loss at optimizer step {step} (epoch {epoch})")
        self.step = step
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults follow the published schedule."""

    learning_rate: float = 0.0003
    weight_decay: float = 0.0002
    batch_size: int = 8
    max_epochs: int = 40
    patience: int = 5
    crop_height: int = 320
    crop_width: int = 480
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.2
    seed: int = 7

    def validate(self) -> None:
        numeric = (self.learning_rate, self.weight_decay, self.batch_size,
                   self.max_epochs, self.patience, self.crop_height, self.crop_width,
                   self.adam_eps)
        if any(v <= 0 for v in numeric[:2]) or any(v < 1 for v in numeric[2:7]):
            raise ValueError("training configuration values must be positive")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie strictly inside (0, 1)")
        if self.crop_height % 16 or self.crop_width % 16:
            raise ValueError("crop size must be divisible by 16")


@dataclass(frozen=True)
class FoldSplit:
    fold_index: int
    train_subjects: tuple
    val_subjects: tuple
    test_subjects: tuple


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    seed: int

    def validate(self) -> None:
        seen_test = []
        for f in self.folds:
            groups = (set(f.train_subjects), set(f.val_subjects), set(f.test_subjects))
            if not all(groups):
                raise ValueError(f"fold {f.fold_index} has an empty subject group")
            total = sum(len(g) for g in groups)
            if len(set().union(*groups)) != total:
                overlap = (groups[0] & groups[1]) | (groups[0] & groups[2]) | (groups[1] & groups[2])
                raise LeakError(f"fold {f.fold_index}: subjects {sorted(overlap)} "
                                "appear in more than one role")
            seen_test.extend(f.test_subjects)
        if len(seen_test) != len(set(seen_test)):
            dupes = sorted({s for s in seen_test if seen_test.count(s) > 1})
            raise LeakError(f"subjects {dupes} are tested in more than one fold")

    def to_json(self) -> str:
        doc = {"seed": self.seed,
               "folds": [asdict(f) for f in self.folds]}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        doc = json.loads(text)
        folds = tuple(FoldSplit(fold_index=f["fold_index"],
                                train_subjects=tuple(f["train_subjects"]),
                                val_subjects=tuple(f["val_subjects"]),
                                test_subjects=tuple(f["test_subjects"]))
                      for f in doc["folds"])
        return cls(folds=folds, seed=doc["seed"])


def make_fold_plan(subject_ids, k: int = 10, val_fraction: float = 0.2,
                   seed: int = 0) -> FoldPlan:
    """Partition subjects into k test folds and split the remainder of
    each fold into train/validation groups, deterministically in seed.

    Test fold sizes differ by at most one; with 49 subjects and k = 10
    that is nine folds of five and one of four.
    """
    ids = sorted(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if len(ids) < k:
        raise ValueError(f"need at least {k} subjects for {k} folds, got {len(ids)}")
    if not (0.0 < val_fraction < 1.0):
        raise ValueError("val_fraction must lie strictly inside (0, 1)")
    order = [ids[i] for i in np.random.default_rng([seed, 0xF0]).permutation(len(ids))]
    base, rem = divmod(len(ids), k)
    folds = []
    start = 0
    for fold_index in range(k):
        size = base + (1 if fold_index < rem else 0)
        test = order[start:start + size]
        start += size
        rest = [s for s in order if s not in test]
        n_val = max(1, round(val_fraction * len(rest)))
        if n_val >= len(rest):
            raise ValueError("validation split leaves no training subjects")
        pick = np.random.default_rng([seed, 0xF1, fold_index]).choice(len(rest), n_val, replace=False)
        val = {rest[i] for i in pick}
        folds.append(FoldSplit(
            fold_index=fold_index,
            train_subjects=tuple(sorted(set(rest) - val)),
            val_subjects=tuple(sorted(val)),
            test_subjects=tuple(sorted(test)),
        ))
    plan = FoldPlan(folds=tuple(folds), seed=seed)
    plan.validate()
    return plan


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainRecord:
    best_epoch: int
    epochs_run: int
    train_losses: list
    val_losses: list
    wall_clock: float


class EarlyStopper:
    """Patience-based stopping on a minimized metric."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.stale = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record one epoch; returns True when the value improved."""
        if value < self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _subjects(samples) -> set:
    return {s.subject_id for s in samples}


def _batched(indices, size):
    for i in range(0, len(indices), size):
        yield indices[i:i + size]


def _to_batch(samples) -> tuple:
    x = np.stack([normalize(s.image) for s in samples])[:, None]
    m = np.stack([s.mask for s in samples]).astype(np.float32)
    return torch.from_numpy(x), torch.from_numpy(m)


def validation_loss(model: ContourNet, samples, cfg: TrainConfig) -> float:
    """Mean per-image summed loss over center crops of the given samples."""
    model.eval()
    total = 0.0
    with torch.no_grad():
        for batch in _batched(list(range(len(samples))), cfg.batch_size):
            crops = [center_crop(samples[i], cfg.crop_height, cfg.crop_width) for i in batch]
            x, m = _to_batch(crops)
            loss, _ = total_loss(model(x), m)
            total += loss.item() * len(batch)
    return total / len(samples)


def train_model(spec: ArchitectureSpec, cfg: TrainConfig, train_samples, val_samples):
    """Fit one model; returns (model with best-validation weights, record).

    The decoupled weight penalty applies to convolution weight tensors
    only, never to biases or normalization affine parameters. Training is
    deterministic in cfg.seed. A non-finite loss aborts with the step.
    """
    cfg.validate()
    if not train_samples or not val_samples:
        raise ValueError("training and validation sets must be nonempty")
    overlap = _subjects(train_samples) & _subjects(val_samples)
    if overlap:
        raise LeakError(f"subjects {sorted(overlap)} appear in both train and validation sets")

    t0 = time.perf_counter()
    model = build_model(spec, cfg.seed)
    decay = [p for p in model.parameters() if p.dim() == 4]
    no_decay = [p for p in model.parameters() if p.dim() != 4]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)

    stopper = EarlyStopper(cfg.patience)
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    train_losses, val_losses = [], []
    step = 0
    epochs_run = 0
    for epoch in range(1, cfg.max_epochs + 1):
        rng = np.random.default_rng([cfg.seed, 0xE0, epoch])
        order = rng.permutation(len(train_samples))
        model.train()
        epoch_loss = 0.0
        for batch in _batched(list(order), cfg.batch_size):
            crops = [random_crop(train_samples[i], cfg.crop_height, cfg.crop_width, rng)
                     for i in batch]
            x, m = _to_batch(crops)
            loss, _ = total_loss(model(x), m)
            if not torch.isfinite(loss):
                raise TrainingDiverged(step=step, epoch=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            epoch_loss += loss.item() * len(batch)
        train_losses.append(epoch_loss / len(train_samples))
        val = validation_loss(model, val_samples, cfg)
        val_losses.append(val)
        epochs_run = epoch
        if stopper.update(epoch, val):
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.info("epoch %d: train %.4f val %.4f%s", epoch, train_losses[-1], val,
                 " *" if stopper.best_epoch == epoch else "")
        if stopper.should_stop:
            break
    model.load_state_dict(best_state)
    record = TrainRecord(best_epoch=stopper.best_epoch, epochs_run=epochs_run,
                         train_losses=train_losses, val_losses=val_losses,
                         wall_clock=time.perf_counter() - t0)
    return model, record


def evaluate_model(model: ContourNet, samples, cfg: TrainConfig,
                   thresholds=None, thin_pred: bool = True):
    """Score fused-output predictions on center crops of ``samples``.

    Returns (EvalSummary, image ids). The matching tolerance follows the
    crop diagonal.
    """
    if not samples:
        raise ValueError("no samples to evaluate")
    if thresholds is None:
        thresholds = default_thresholds()
    tol = default_tolerance((cfg.crop_height, cfg.crop_width))
    model.eval()
    curves, ids = [], []
    with torch.no_grad():
        for batch in _batched(list(range(len(samples))), cfg.batch_size):
            crops = [center_crop(samples[i], cfg.crop_height, cfg.crop_width) for i in batch]
            x, _ = _to_batch(crops)
            prob = predict(model(x).fused)[:, 0].cpu().numpy()
            for crop, p in zip(crops, prob):
                curves.append(pr_curve(p, crop.mask, thresholds, tol, thin_pred=thin_pred))
                ids.append(f"{crop.subject_id}_s{crop.slice_index:04d}")
    return ods_ois(curves), ids


# ---------------------------------------------------------------------------
# Iterative hyper-parameter search


@dataclass
class Trial:
    index: int
    stage: str
    gc_stages: int
    cge_stages: int
    num_groups: int
    fusion_channels: int
    val_loss: float
    param_count: int


@dataclass
class SearchResult:
    trials: list
    chosen_spec: ArchitectureSpec
    best_model: ContourNet
    best_record: TrainRecord


def hyperparam_search(base_spec: ArchitectureSpec, cfg: TrainConfig,
                      train_samples, val_samples) -> SearchResult:
    """Three sequential validation-loss sweeps: block placement over the
    six mG-nC layouts, then group count, then fusion width, each fixing
    the previous winner — 14 trainings instead of the 96 of a full grid.

    Ties resolve toward fewer parameters. The returned model is the
    trained winner of the final sweep.
    """
    if base_spec.topology != "upinet":
        raise ValueError("the block-placement search applies to the upinet topology only")
    trials = []
    index = 0

    def sweep(stage, candidates):
        nonlocal index
        best = None
        for spec in candidates:
            spec.validate()
            model, record = train_model(spec, cfg, train_samples, val_samples)
            val = min(record.val_losses)
            n_params = count_params(model)
            trials.append(Trial(index=index, stage=stage,
                                gc_stages=spec.gc_stages, cge_stages=spec.cge_stages,
                                num_groups=spec.num_groups, fusion_channels=spec.fusion_channels,
                                val_loss=val, param_count=n_params))
            log.info("trial %02d [%s] %dG-%dC N_G=%d N_C=%d: val %.4f (%.2fM params)",
                     index, stage, spec.gc_stages, spec.cge_stages, spec.num_groups,
                     spec.fusion_channels, val, n_params / 1e6)
            key = (val, n_params)
            if best is None or key < best[0]:
                best = (key, spec, model, record)
            index += 1
        return best[1], best[2], best[3]

    placement, _, _ = sweep("placement", [
        replace(base_spec, gc_stages=m, cge_stages=n) for m, n in PLACEMENT_GRID])
    grouped, _, _ = sweep("groups", [
        replace(placement, num_groups=g) for g in GROUPS_GRID])
    chosen, model, record = sweep("fusion", [
        replace(grouped, fusion_channels=c) for c in FUSION_GRID])
    return SearchResult(trials=trials, chosen_spec=chosen,
                        best_model=model, best_record=record)


# ---------------------------------------------------------------------------
# Nested cross-validation


@dataclass
class FoldResult:
    fold_index: int
    spec_text: str
    best_epoch: int
    train_losses: list
    val_losses: list
    ods: float
    ois: float
    ods_threshold: float
    wall_clock: float
    summary: EvalSummary
    image_ids: list
    search_trials: list | None = None


def fold_quartiles(values) -> dict:
    v = np.asarray(list(values), dtype=np.float64)
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return {"median": float(med), "q1": float(q1), "q3": float(q3)}


def format_stat(stats: dict) -> str:
    return f"{stats['median']:.3f} [{stats['q1']:.3f}, {stats['q3']:.3f}]"


@dataclass
class CVResult:
    plan: FoldPlan
    folds: list
    aggregate: dict


def _samples_for(volumes_by_subject, subjects) -> list:
    out = []
    for sid in subjects:
        out.extend(volumes_by_subject[sid].slices)
    return out


def _run_fold(volumes_by_subject, fold: FoldSplit, spec: ArchitectureSpec,
              cfg: TrainConfig, search: bool, thresholds, thin_pred: bool,
              fold_out=None) -> FoldResult:
    groups = (set(fold.train_subjects), set(fold.val_subjects), set(fold.test_subjects))
    if sum(len(g) for g in groups) != len(set().union(*groups)):
        raise LeakError(f"fold {fold.fold_index} groups overlap")
    t0 = time.perf_counter()
    train_s = _samples_for(volumes_by_subject, fold.train_subjects)
    val_s = _samples_for(volumes_by_subject, fold.val_subjects)
    test_s = _samples_for(volumes_by_subject, fold.test_subjects)
    trials = None
    if search:
        sr = hyperparam_search(spec, cfg, train_s, val_s)
        model, record, used_spec = sr.best_model, sr.best_record, sr.chosen_spec
        trials = sr.trials
    else:
        model, record = train_model(spec, cfg, train_s, val_s)
        used_spec = spec
    summary, ids = evaluate_model(model, test_s, cfg, thresholds=thresholds, thin_pred=thin_pred)
    result = FoldResult(
        fold_index=fold.fold_index, spec_text=used_spec.to_text(),
        best_epoch=record.best_epoch, train_losses=record.train_losses,
        val_losses=record.val_losses, ods=summary.ods_f, ois=summary.ois_f,
        ods_threshold=summary.ods_threshold,
        wall_clock=time.perf_counter() - t0,
        summary=summary, image_ids=ids, search_trials=trials)
    log.info("fold %d: ODS %.3f OIS %.3f (best epoch %d, %.1fs)",
             fold.fold_index, result.ods, result.ois, result.best_epoch, result.wall_clock)
    if fold_out is not None:
        _write_fold_dir(Path(fold_out), result, model=model)
    return result


def _fold_payload(args):
    return _run_fold(*args)


def run_nested_cv(volumes, plan: FoldPlan, spec: ArchitectureSpec, cfg: TrainConfig,
                  *, search: bool = False, thresholds=None, thin_pred: bool = True,
                  out_dir=None, jobs: int = 1) -> CVResult:
    """Train and test once per fold; aggregate fold ODS/OIS quartiles.

    Test subjects never reach training or tuning: the plan is checked
    mechanically before any fitting, and each fold evaluates its test
    set exactly once, after training completes.
    """
    plan.validate()
    cfg.validate()
    volumes = list(volumes)
    volumes_by_subject = {v.subject_id: v for v in volumes}
    if len(volumes_by_subject) != len(volumes):
        raise ValueError("duplicate subject ids in dataset")
    needed = {s for f in plan.folds for s in f.train_subjects + f.val_subjects + f.test_subjects}
    missing = needed - set(volumes_by_subject)
    if missing:
        raise ValueError(f"plan references subjects not in the dataset: {sorted(missing)}")

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "folds").mkdir(parents=True, exist_ok=True)
        (out / "fold_plan.json").write_text(plan.to_json(), encoding="utf-8")

    payloads = [(volumes_by_subject, f, spec, cfg, search, thresholds, thin_pred, out)
                for f in plan.folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_payload, payloads))
    else:
        results = [_fold_payload(p) for p in payloads]

    aggregate = {
        "spec": spec.to_text(),
        "search": search,
        "folds": [{"fold_index": r.fold_index, "ods": r.ods, "ois": r.ois,
                   "ods_threshold": r.ods_threshold, "best_epoch": r.best_epoch}
                  for r in results],
        "ods": fold_quartiles(r.ods for r in results),
        "ois": fold_quartiles(r.ois for r in results),
    }
    if out is not None:
        (out / "aggregate.json").write_text(json.dumps(aggregate, indent=2, sort_keys=True) + "\n",
                                            encoding="utf-8")
        name = spec.topology if not search else f"{spec.topology} (tuned)"
        table = format_report_table([(name, aggregate)])
        (out / "aggregate.txt").write_text(table, encoding="utf-8")
    return CVResult(plan=plan, folds=results, aggregate=aggregate)


def _write_fold_dir(out: Path, res: FoldResult, model) -> None:
    fold_dir = out / "folds" / f"fold_{res.fold_index:02d}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    write_results_csv(fold_dir / "results.csv", res.image_ids, res.summary)
    doc = {"fold_index": res.fold_index, "spec": res.spec_text,
           "best_epoch": res.best_epoch, "train_losses": res.train_losses,
           "val_losses": res.val_losses, "ods": res.ods, "ois": res.ois,
           "ods_threshold": res.ods_threshold, "wall_clock_s": res.wall_clock}
    if res.search_trials is not None:
        doc["search_trials"] = [asdict(t) for t in res.search_trials]
    (fold_dir / "fold.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    if model is not None:
        save_checkpoint(fold_dir / "checkpoint.cntl", model, epoch=res.best_epoch)


def format_report_table(named_aggregates) -> str:
    """Text table of per-model fold statistics, one row per run."""
    rows = [("Model", "ODS", "OIS")]
    for name, agg in named_aggregates:
        rows.append((name, format_stat(agg["ods"]), format_stat(agg["ois"])))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Ablation suite (coordinate channels / side-output supervision)


ABLATION_VARIANTS = (
    ("baseline-1", dict(use_coordconv=False, use_side_output=True)),
    ("baseline-2", dict(use_coordconv=True, use_side_output=False)),
    ("upi-net", dict(use_coordconv=True, use_side_output=True)),
)


@dataclass
class AblationRow:
    name: str
    use_coordconv: bool
    use_side_output: bool
    result: CVResult


def ablation_suite(volumes, plan: FoldPlan, base_spec: ArchitectureSpec,
                   cfg: TrainConfig, *, thresholds=None, thin_pred: bool = True,
                   out_dir=None, jobs: int = 1) -> list:
    """Train and evaluate the coordinate-channel and side-output variants
    under one shared fold plan and seed; returns one row per variant."""
    if base_spec.topology != "upinet":
        raise ValueError("the ablation grid applies to the upinet topology")
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    for name, flags in ABLATION_VARIANTS:
        spec = replace(base_spec, **flags)
        sub = out / name if out is not None else None
        cv = run_nested_cv(volumes, plan, spec, cfg, thresholds=thresholds,
                           thin_pred=thin_pred, out_dir=sub, jobs=jobs)
        rows.append(AblationRow(name=name, use_coordconv=spec.use_coordconv,
                                use_side_output=spec.use_side_output, result=cv))
    if out is not None:
        table = format_ablation_table(rows)
        (out / "ablation.txt").write_text(table, encoding="utf-8")
        doc = [{"name": r.name, "coordconv": r.use_coordconv,
                "side_output": r.use_side_output,
                "ods": r.result.aggregate["ods"], "ois": r.result.aggregate["ois"]}
               for r in rows]
        (out / "ablation.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
    return rows


def format_ablation_table(rows) -> str:
    table = [("Model", "Coord-Conv", "Side-output", "ODS")]
    for r in rows:
        table.append((r.name,
                      "yes" if r.use_coordconv else "no",
                      "yes" if r.use_side_output else "no",
                      format_stat(r.result.aggregate["ods"])))
    widths = [max(len(row[i]) for row in table) for i in range(4)]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
             for row in table]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines) + "\n"
