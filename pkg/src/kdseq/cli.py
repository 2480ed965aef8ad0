"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 usage/config error,
3 missing or failed runs.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from . import gradcheck, orchestrator as orch, registry
from .config import ConfigError, RunConfig, load_config
from .distill import BUDGETED, SCHEDULE_NAMES, DistillPolicy, Schedule

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_RUNS = 0, 1, 2, 3


class UsageError(Exception):
    pass


class RunsError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("expected at least one number")
    return values


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _pct(x: float) -> str:
    return f"{100 * x:.1f}%"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kdseq", description="Distill earlier training runs into new ones.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--registry", help="registry directory (overrides registry_dir)")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--gamma", type=float)
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("teacher", help="train one plain run")
    common(sp)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--run-id")
    sp.add_argument("--wide", action="store_true", help="width-scaled larger-model baseline")

    sp = sub.add_parser("sweep", help="learning-rate sweep of teachers B0..Bn-1")
    common(sp)
    sp.add_argument("--lrs", type=_float_list, default=list(orch.DEFAULT_LRS))
    sp.add_argument("--prefix", default="B")

    sp = sub.add_parser("distill", help="train a student from registered teachers")
    common(sp)
    sp.add_argument("--teachers", default=None, help="comma-separated ids, 'best' or 'worst'")
    sp.add_argument("--schedule", choices=SCHEDULE_NAMES)
    sp.add_argument("--budget", type=int)
    sp.add_argument("--sample-k", type=int)
    sp.add_argument("--gate", type=_bool)
    sp.add_argument("--replicates", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--run-id")

    sp = sub.add_parser("finetune", help="continue training from a teacher's weights")
    common(sp)
    sp.add_argument("--teacher", default="best", help="teacher id or 'best'")
    sp.add_argument("--lr", type=float, default=0.1)
    sp.add_argument("--run-id")

    sp = sub.add_parser("report", help="epochs-to-accuracy and cost tables as CSV")
    sp.add_argument("--registry", required=True)
    sp.add_argument("--thresholds", type=_float_list, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--pareto-out")

    sp = sub.add_parser("verify-grad", help="finite-difference gradient gate")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--trials", type=int, default=50)
    return p


def _load(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config) if args.config else RunConfig()
    reg = Path(args.registry or cfg.registry_dir)
    return cfg, reg


def _sgd(cfg: RunConfig, args, **extra):
    return cfg.sgd_config(epochs=args.epochs, batch_size=args.batch_size, gamma=args.gamma,
                          seed=args.seed, **extra)


def cmd_teacher(args) -> int:
    cfg, reg = _load(args)
    sgd = _sgd(cfg, args, initial_lr=args.lr)
    train, test = cfg.datasets()
    if args.wide:
        rec = orch.train_wide_baseline(sgd, train, test, args.run_id or f"WIDE{sgd.seed}", cfg.hidden,
                                       cfg.width_multiplier, reg)
    else:
        rec = orch.train_teacher(sgd, train, test, args.run_id or f"T{sgd.seed}", cfg.hidden, reg)
    m = rec.manifest
    print(f"{m.run_id} lr={sgd.initial_lr:g} final_acc={_pct(m.final_test_accuracy)} "
          f"wall_est={m.cost.estimated_wall_seconds:.0f}s")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, reg = _load(args)
    base = _sgd(cfg, args)
    train, test = cfg.datasets()
    try:
        records = orch.sweep(args.lrs, base, train, test, cfg.hidden, reg, args.prefix)
        failures = []
    except orch.SweepDivergedError as exc:
        records, failures = exc.records, exc.failures
    for rec in records:
        m = rec.manifest
        print(f"{m.run_id} lr={m.config.initial_lr:g} final_acc={_pct(m.final_test_accuracy)} "
              f"wall_est={m.cost.estimated_wall_seconds:.0f}s")
    for f in failures:
        print(f"{f.run_id} DIVERGED at epoch {f.epoch + 1}")
    return EXIT_RUNS if failures else EXIT_OK


def _resolve_teachers(choice: str | None, reg: Path) -> list[str]:
    teachers = [m.run_id for m in registry.list_runs(reg) if m.role == "teacher"]
    if choice is None or choice == "all":
        if not teachers:
            raise RunsError(f"no teachers registered in {reg}")
        return teachers
    if choice in ("best", "worst"):
        pick = registry.best_teacher if choice == "best" else registry.worst_teacher
        try:
            return [pick(reg).run_id]
        except registry.NoTeachersError as exc:
            raise RunsError(str(exc)) from None
    ids = [t.strip() for t in choice.split(",") if t.strip()]
    unknown = [t for t in ids if t not in teachers]
    if unknown:
        raise UsageError(f"--teachers: unknown teacher id(s) {', '.join(unknown)}")
    return ids


def cmd_distill(args) -> int:
    cfg, reg = _load(args)
    sgd = _sgd(cfg, args, initial_lr=args.lr)
    ids = _resolve_teachers(args.teachers, reg)
    base = cfg.distill_policy()
    k = args.sample_k if args.sample_k is not None else (base.sample_k or len(ids))
    if not 0 <= k <= len(ids):
        raise UsageError(f"--sample-k {k} is outside [0, {len(ids)}] for teachers {','.join(ids)}")
    schedule = Schedule(args.schedule or base.schedule.kind,
                        args.budget if args.budget is not None else base.schedule.budget)
    if schedule.kind in BUDGETED and schedule.budget > sgd.epochs:
        raise UsageError(f"--budget {schedule.budget} exceeds {sgd.epochs} epochs")
    gate = args.gate if args.gate is not None else base.gate_on_correct
    policy = DistillPolicy(schedule, k, gate)
    replicates = args.replicates if args.replicates is not None else cfg.replicates
    if replicates < 1:
        raise UsageError("--replicates must be >= 1")
    run_id = args.run_id or (f"S_{'-'.join(ids)}_{schedule.kind.value}_k{k}" + ("_gate" if gate else ""))

    train, test = cfg.datasets()
    ensemble = orch.load_ensemble(reg, ids)
    res = orch.train_student(sgd, ensemble, policy, train, test, replicates, run_id, cfg.hidden, reg)
    m = res.aggregate.manifest
    print(f"{m.run_id} teachers={','.join(ids)} schedule={schedule.kind.value} k={k} gate={gate}")
    print(f"final_mean_acc={_pct(m.final_test_accuracy)} relative_cost={m.cost.relative_cost:.4f} "
          f"overhead={orch.overhead_percent(m.cost.relative_cost):.1f}% "
          f"wall_est={m.cost.estimated_wall_seconds:.0f}s")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, reg = _load(args)
    sgd = _sgd(cfg, args, initial_lr=args.lr)
    if args.teacher == "best":
        try:
            teacher_id = registry.best_teacher(reg).run_id
        except registry.NoTeachersError as exc:
            raise RunsError(str(exc)) from None
    else:
        teacher_id = args.teacher
    train, test = cfg.datasets()
    try:
        rec = orch.finetune_from(teacher_id, sgd, train, test, reg, args.run_id)
    except (KeyError, FileNotFoundError) as exc:
        raise RunsError(str(exc)) from None
    print(f"{rec.run_id} from={teacher_id} start_acc={_pct(rec.initial_test_accuracy)} "
          f"final_acc={_pct(rec.final_accuracy)}")
    return EXIT_OK


def report_tables(reg, thresholds) -> tuple[str, str]:
    """(epochs-to-threshold CSV, pareto CSV) for every registered run."""
    manifests = registry.list_runs(reg)
    if not manifests:
        raise RunsError(f"no runs registered in {reg}")
    records = [orch.load_record(reg, m) for m in manifests]
    table = orch.threshold_table(records, thresholds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "role", "final_accuracy", "relative_cost", "overhead_percent"])
    for m in manifests:
        w.writerow([m.run_id, m.role, f"{100 * m.final_test_accuracy:.1f}", f"{m.cost.relative_cost:.4f}",
                    f"{orch.overhead_percent(m.cost.relative_cost):.1f}"])
    return table.to_csv(), buf.getvalue()


def cmd_report(args) -> int:
    thresholds = sorted(args.thresholds)
    epochs_csv, pareto_csv = report_tables(args.registry, thresholds)
    out = Path(args.out)
    pareto = Path(args.pareto_out) if args.pareto_out else out.with_name(f"{out.stem}_pareto{out.suffix or '.csv'}")
    out.write_text(epochs_csv)
    pareto.write_text(pareto_csv)
    sys.stdout.write(epochs_csv)
    print(f"wrote {out} and {pareto}")
    return EXIT_OK


def cmd_verify_grad(args) -> int:
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    report = gradcheck.run_checks(args.seed, args.trials)
    print(f"checked {len(report.cases)} configurations, max relative error {report.max_error:.3e}")
    if not report.passed:
        print(f"FAIL: {report.worst.describe()}")
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {
    "teacher": cmd_teacher,
    "sweep": cmd_sweep,
    "distill": cmd_distill,
    "finetune": cmd_finetune,
    "report": cmd_report,
    "verify-grad": cmd_verify_grad,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"kdseq {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunsError, orch.DivergedRunError) as exc:
        print(f"kdseq {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNS


if __name__ == "__main__":
    sys.exit(main())
