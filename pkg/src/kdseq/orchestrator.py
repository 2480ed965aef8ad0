"""Multi-run workflows: teachers, learning-rate sweeps, distilled students,
fine-tuning and wide-model baselines, plus cost and time-to-accuracy
accounting.

Epochs are 0-indexed internally and 1-indexed in metrics files and reports.
"""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import registry
from .dataset import Dataset, batches, steps_per_epoch
from .distill import (
    DistillPolicy,
    TeacherEnsemble,
    active_epochs,
    average_logits,
    effective_k,
    gate_mask,
    kd_batch_loss,
    sample_teachers,
    schedule_active,
    step_rng,
    teacher_step_count,
)
from .nncore import (
    ModelParams,
    NonFiniteError,
    SgdConfig,
    accuracy,
    backward,
    forward_with_cache,
    init_params,
    lr_at_epoch,
    sgd_step,
)
from .registry import CostSummary, RunManifest

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_loss", "test_accuracy", "lr", "kd_active", "teachers_used",
                  "cum_cost_units", "cum_wall_seconds_est"]
DEFAULT_LRS = (0.5, 0.2, 0.1, 0.05, 0.01)
DEFAULT_HIDDEN = (64, 64)


class DivergedRunError(FloatingPointError):
    def __init__(self, run_id: str, epoch: int):
        super().__init__(f"run {run_id!r} diverged at epoch {epoch + 1}")
        self.run_id = run_id
        self.epoch = epoch


class SweepDivergedError(RuntimeError):
    """Some sweep runs diverged; the others finished and are in ``records``."""

    def __init__(self, records, failures):
        ids = ", ".join(f.run_id for f in failures)
        super().__init__(f"{len(failures)} sweep run(s) diverged: {ids}")
        self.records = records
        self.failures = failures


@dataclass(frozen=True)
class CostModel:
    forward_fraction: float = 1.0 / 3.0
    base_epoch_seconds: float = 15.0
    per_teacher_epoch_seconds: float = 5.0

    def __post_init__(self):
        if not 0 < self.forward_fraction < 1:
            raise ValueError("forward_fraction must lie in (0, 1)")
        if self.base_epoch_seconds <= 0 or self.per_teacher_epoch_seconds <= 0:
            raise ValueError("epoch timings must be positive")


@dataclass(frozen=True)
class MetricsRow:
    epoch: int  # 1-indexed
    train_loss: float
    test_accuracy: float
    lr: float
    kd_active: int
    teachers_used: int
    cum_cost_units: float
    cum_wall_seconds_est: float


@dataclass(eq=False)
class RunRecord:
    manifest: RunManifest
    rows: list[MetricsRow]
    params: ModelParams | None = None
    initial_test_accuracy: float | None = None

    @property
    def run_id(self) -> str:
        return self.manifest.run_id

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([r.test_accuracy for r in self.rows])

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].test_accuracy

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.rows)


@dataclass
class StudentResult:
    aggregate: RunRecord
    replicates: list[RunRecord]


@dataclass
class ThresholdTable:
    thresholds: list[float]
    rows: dict[str, list[int | None]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run"] + [f"{t:g}" for t in self.thresholds])
        for run_id, cells in self.rows.items():
            w.writerow([run_id] + ["---" if c is None else c for c in cells])
        return buf.getvalue()


# --- metrics files ----------------------------------------------------------

def metrics_to_csv(rows: Sequence[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in rows:
        w.writerow([r.epoch, repr(r.train_loss), repr(r.test_accuracy), repr(r.lr), r.kd_active,
                    r.teachers_used, repr(r.cum_cost_units), repr(r.cum_wall_seconds_est)])
    return buf.getvalue()


def read_metrics(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRow(int(d["epoch"]), float(d["train_loss"]), float(d["test_accuracy"]),
                           float(d["lr"]), int(d["kd_active"]), int(d["teachers_used"]),
                           float(d["cum_cost_units"]), float(d["cum_wall_seconds_est"]))
                for d in reader]


def load_record(registry_dir, manifest: RunManifest) -> RunRecord:
    rows = read_metrics(registry.resolve_path(registry_dir, manifest.metrics_path))
    return RunRecord(manifest, rows)


def _persist(record: RunRecord, registry_dir, write_manifest=True):
    directory = Path(registry_dir)
    directory.mkdir(parents=True, exist_ok=True)
    m = record.manifest
    if registry.manifest_path(directory, m.run_id).exists():
        raise registry.DuplicateRunError(f"run {m.run_id!r} already registered in {directory}")
    m.metrics_path = m.metrics_path or f"{m.run_id}.metrics.csv"
    registry._atomic_write(directory / m.metrics_path, record.metrics_csv().encode())
    if record.params is not None:
        m.checkpoint_path = m.checkpoint_path or f"{m.run_id}.ckpt"
        registry.save_checkpoint(record.params, directory / m.checkpoint_path)
    if write_manifest:
        registry.write_manifest(m, directory)


# --- cost accounting --------------------------------------------------------

def relative_cost(policy: DistillPolicy | None, n_available: int, total_epochs: int,
                  model: CostModel = CostModel()) -> float:
    """Training compute relative to a plain run; each teacher forward costs
    ``forward_fraction`` of a training step."""
    if policy is None:
        return 1.0
    k = effective_k(policy, n_available)
    if k == 0:
        return 1.0
    active = len(active_epochs(policy.schedule, total_epochs))
    return 1.0 + model.forward_fraction * k * active / total_epochs


def overhead_percent(rel_cost: float) -> float:
    return (rel_cost - 1.0) * 100.0


def wall_estimate(policy: DistillPolicy | None, total_epochs: int,
                  model: CostModel = CostModel()) -> float:
    k = policy.sample_k if policy is not None else 0
    seconds = 0.0
    for ep in range(total_epochs):
        used = k if k and schedule_active(policy.schedule, ep, total_epochs) else 0
        seconds += model.base_epoch_seconds + model.per_teacher_epoch_seconds * used
    return seconds


def compute_to_threshold(rel_cost: float, epochs: int | None) -> float:
    """Plain-epoch equivalents spent before first reaching a threshold."""
    return float("inf") if epochs is None else rel_cost * epochs


# --- time to accuracy -------------------------------------------------------

def first_epoch_reaching(accuracies: Sequence[float], threshold: float) -> int | None:
    """1-indexed first epoch with accuracy >= threshold, or None."""
    for i, acc in enumerate(accuracies):
        if acc >= threshold:
            return i + 1
    return None


def epochs_to_accuracy(record, thresholds: Sequence[float]) -> ThresholdTable:
    thresholds = [float(t) for t in thresholds]
    if any(a > b for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    if isinstance(record, RunRecord):
        run_id, accs = record.run_id, record.accuracies
    else:
        run_id, accs = "run", list(record)
    return ThresholdTable(thresholds, {run_id: [first_epoch_reaching(accs, t) for t in thresholds]})


def threshold_table(records: Sequence[RunRecord], thresholds: Sequence[float]) -> ThresholdTable:
    table = ThresholdTable([float(t) for t in thresholds])
    for rec in records:
        table.rows.update(epochs_to_accuracy(rec, thresholds).rows)
    return table


# --- training ---------------------------------------------------------------

def model_dims(ds: Dataset, hidden: Sequence[int]) -> list[int]:
    return [ds.n_features, *hidden, ds.class_count]


def _train(params: ModelParams, config: SgdConfig, train: Dataset, test: Dataset, run_id: str,
           ensemble: TeacherEnsemble | None = None, policy: DistillPolicy | None = None,
           cost_model: CostModel = CostModel(), unit_scale: float = 1.0
           ) -> tuple[ModelParams, list[MetricsRow]]:
    n = len(ensemble) if ensemble is not None else 0
    k = effective_k(policy, n) if policy is not None else 0
    gate = bool(policy and policy.gate_on_correct)
    if k:
        schedule_active(policy.schedule, 0, config.epochs)  # validates budget vs epochs up front

    rows, cum_units, cum_wall = [], 0.0, 0.0
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        active = k > 0 and schedule_active(policy.schedule, epoch, config.epochs)
        used = k if active else 0
        total_loss = 0.0
        for bi, (xb, yb) in enumerate(batches(train, config.batch_size, config.seed, epoch)):
            logits, cache = forward_with_cache(params, xb)
            if active:
                # all teachers in registry order when k == n; no RNG draw needed
                idx = range(n) if k == n else sample_teachers(step_rng(config.seed, epoch, bi), n, k)
                target = average_logits(ensemble.logits(xb, idx))
                mask = gate_mask(target, yb) if gate else None
                loss, dlogits = kd_batch_loss(logits, yb, target, mask)
            else:
                loss, dlogits = kd_batch_loss(logits, yb)
            if not np.isfinite(loss):
                raise DivergedRunError(run_id, epoch)
            try:
                params = sgd_step(params, backward(params, xb, dlogits, cache), lr)
            except NonFiniteError:
                raise DivergedRunError(run_id, epoch) from None
            total_loss += loss * len(yb)
            cum_units += unit_scale * (1.0 + cost_model.forward_fraction * used)
        cum_wall += unit_scale * cost_model.base_epoch_seconds + cost_model.per_teacher_epoch_seconds * used
        rows.append(MetricsRow(epoch + 1, total_loss / len(train), accuracy(params, test.features, test.labels),
                               lr, int(active), used, cum_units, cum_wall))
    return params, rows


def _finish(params0, params, rows, manifest, test, registry_dir):
    manifest.final_test_accuracy = rows[-1].test_accuracy
    rec = RunRecord(manifest, rows, params, accuracy(params0, test.features, test.labels))
    if registry_dir is not None:
        _persist(rec, registry_dir)
    return rec


def train_teacher(config: SgdConfig, train: Dataset, test: Dataset, run_id: str,
                  hidden: Sequence[int] = DEFAULT_HIDDEN, registry_dir=None,
                  cost_model: CostModel = CostModel()) -> RunRecord:
    """Plain cross-entropy training from a seeded initialization."""
    params0 = init_params(config.seed, model_dims(train, hidden))
    params, rows = _train(params0, config, train, test, run_id, cost_model=cost_model)
    cost = CostSummary(1.0, wall_estimate(None, config.epochs, cost_model), 0)
    manifest = RunManifest(run_id, "teacher", config, replicate_seeds=[config.seed], cost=cost)
    log.info("teacher %s lr=%g final acc %.4f", run_id, config.initial_lr, rows[-1].test_accuracy)
    return _finish(params0, params, rows, manifest, test, registry_dir)


def sweep(lrs: Sequence[float], base: SgdConfig, train: Dataset, test: Dataset,
          hidden: Sequence[int] = DEFAULT_HIDDEN, registry_dir=None, prefix: str = "B",
          cost_model: CostModel = CostModel()) -> list[RunRecord]:
    """One teacher per learning rate, ids ``B0..B{n-1}``, seeds ``base.seed + i``.

    Diverged runs do not stop the sweep; they are reported together at the end
    through ``SweepDivergedError``.
    """
    if not lrs:
        raise ValueError("need at least one learning rate")
    records, failures = [], []
    for i, lr in enumerate(lrs):
        cfg = replace(base, initial_lr=float(lr), seed=base.seed + i)
        try:
            records.append(train_teacher(cfg, train, test, f"{prefix}{i}", hidden, registry_dir, cost_model))
        except DivergedRunError as exc:
            log.warning("%s", exc)
            failures.append(exc)
    if failures:
        raise SweepDivergedError(records, failures)
    return records


def load_ensemble(registry_dir, ids: Sequence[str]) -> TeacherEnsemble:
    members = []
    for tid in ids:
        m = registry.get_run(registry_dir, tid)
        members.append((tid, registry.load_checkpoint(registry.resolve_path(registry_dir, m.checkpoint_path))))
    return TeacherEnsemble(tuple(members))


def _mean_rows(groups: list[list[MetricsRow]]) -> list[MetricsRow]:
    out = []
    for per_epoch in zip(*groups):
        first = per_epoch[0]
        out.append(replace(
            first,
            train_loss=float(np.mean([r.train_loss for r in per_epoch])),
            test_accuracy=float(np.mean([r.test_accuracy for r in per_epoch])),
        ))
    return out


def train_student(config: SgdConfig, ensemble: TeacherEnsemble | None, policy: DistillPolicy,
                  train: Dataset, test: Dataset, replicates: int = 3, run_id: str = "S",
                  hidden: Sequence[int] = DEFAULT_HIDDEN, registry_dir=None,
                  cost_model: CostModel = CostModel()) -> StudentResult:
    """Distill into ``replicates`` students seeded ``config.seed + r``.

    The aggregate record holds per-epoch means over replicates. Replicate
    metrics and checkpoints are persisted as ``<run_id>.r<i>.*``; only the
    aggregate gets a manifest.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    if ensemble is not None and policy.teacher_subset is not None:
        ensemble = ensemble.subset(policy.teacher_subset)
    n = len(ensemble) if ensemble is not None else 0
    k = effective_k(policy, n)
    if k == 0:
        ensemble = None
    dims = model_dims(train, hidden)
    if ensemble is not None:
        tdims = ensemble.members[0][1].dims
        if (tdims[0], tdims[-1]) != (dims[0], dims[-1]):
            raise ValueError(f"teacher widths {tdims} incompatible with student {dims}")

    cost = CostSummary(relative_cost(policy, n, config.epochs, cost_model),
                       wall_estimate(policy, config.epochs, cost_model),
                       teacher_step_count(policy, n, config.epochs,
                                          steps_per_epoch(len(train), config.batch_size)))
    parents = ensemble.ids if ensemble is not None else []
    seeds = [config.seed + r for r in range(replicates)]

    records = []
    for r, seed in enumerate(seeds):
        cfg = replace(config, seed=seed)
        rid = f"{run_id}.r{r}"
        params0 = init_params(seed, dims)
        params, rows = _train(params0, cfg, train, test, rid, ensemble, policy, cost_model)
        m = RunManifest(rid, "student", cfg, policy, list(parents), [seed], rows[-1].test_accuracy,
                        cost=replace(cost))
        rec = RunRecord(m, rows, params, accuracy(params0, test.features, test.labels))
        if registry_dir is not None:
            _persist(rec, registry_dir, write_manifest=False)
        records.append(rec)
        log.info("student %s final acc %.4f", rid, rows[-1].test_accuracy)

    rows = _mean_rows([rec.rows for rec in records])
    agg_manifest = RunManifest(run_id, "student", config, policy, list(parents), seeds,
                               rows[-1].test_accuracy, cost=cost,
                               checkpoint_path=records[0].manifest.checkpoint_path)
    aggregate = RunRecord(agg_manifest, rows)
    if registry_dir is not None:
        _persist(aggregate, registry_dir)
    return StudentResult(aggregate, records)


def finetune_from(teacher_id: str, config: SgdConfig, train: Dataset, test: Dataset,
                  registry_dir, run_id: str | None = None,
                  cost_model: CostModel = CostModel()) -> RunRecord:
    """Continue plain training from a registered teacher's weights."""
    teacher = registry.get_run(registry_dir, teacher_id)
    path = registry.resolve_path(registry_dir, teacher.checkpoint_path)
    if not teacher.checkpoint_path or not path.exists():
        raise FileNotFoundError(f"teacher {teacher_id!r} has no checkpoint at {path}")
    params0 = registry.load_checkpoint(path)
    run_id = run_id or f"FT-{teacher_id}"
    params, rows = _train(params0, config, train, test, run_id, cost_model=cost_model)
    cost = CostSummary(1.0, wall_estimate(None, config.epochs, cost_model), 0)
    manifest = RunManifest(run_id, "finetune", config, parent_ids=[teacher_id],
                           replicate_seeds=[config.seed], cost=cost)
    return _finish(params0, params, rows, manifest, test, registry_dir)


def train_wide_baseline(config: SgdConfig, train: Dataset, test: Dataset, run_id: str = "WIDE",
                        hidden: Sequence[int] = DEFAULT_HIDDEN, width_multiplier: int = 2,
                        registry_dir=None, cost_model: CostModel = CostModel()) -> RunRecord:
    """Larger-model baseline: hidden widths scaled up, charged ``width_multiplier``
    cost units per step."""
    wide = [h * width_multiplier for h in hidden]
    params0 = init_params(config.seed, model_dims(train, wide))
    scale = float(width_multiplier)
    params, rows = _train(params0, config, train, test, run_id, cost_model=cost_model, unit_scale=scale)
    cost = CostSummary(scale, scale * wall_estimate(None, config.epochs, cost_model), 0)
    manifest = RunManifest(run_id, "baseline", config, replicate_seeds=[config.seed], cost=cost)
    return _finish(params0, params, rows, manifest, test, registry_dir)
