"""Command-line entry points: `flash run` and `flash report`."""

from __future__ import annotations

import argparse
import sys

from .cache import DEFAULT_CACHE_BUDGET_BYTES
from .errors import ConfigParseError, FlashError
from .executor import DEFAULT_NOISE_SD, make_synthetic_executor, spawn_external
from .graph import load_spec
from .orchestrator import BudgetConfig, PhaseBudget, report, run_flash


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flash", description="Budgeted pipeline configuration search."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="tune a pipeline spec under a time budget")
    run.add_argument("--spec", required=True, help="pipeline spec JSON file")
    run.add_argument(
        "--executor",
        required=True,
        help='"synthetic" or subprocess:"<worker command>"',
    )
    run.add_argument("--t-init", default="30", help="phase-1 budget: iterations, or seconds with an s suffix")
    run.add_argument("--t-prune", default="30", help="phase-2 budget: iterations, or seconds with an s suffix")
    run.add_argument("--t-total", required=True, type=float, help="total budget in seconds")
    run.add_argument("--top-r", default=10, type=int, help="paths kept after pruning")
    run.add_argument("--xi", default=100.0, type=float, help="exploration margin for phase-2 selection")
    run.add_argument("--ridge-lambda", default=1.0, type=float, help="ridge regularizer")
    run.add_argument("--cache-bytes", default=DEFAULT_CACHE_BUDGET_BYTES, type=int, help="prefix cache budget")
    run.add_argument("--candidate-budget", default=2048, type=int, help="max candidate paths per selection")
    run.add_argument("--per-run-timeout", default=900.0, type=float, help="seconds allowed per pipeline run")
    run.add_argument("--seed", default=0, type=int)
    run.add_argument("--trace-out", default="flash-trace.csv", help="trace CSV destination")
    run.add_argument(
        "--noise-sd",
        default=DEFAULT_NOISE_SD,
        type=float,
        help="synthetic executor only: observation noise standard deviation",
    )

    rep = sub.add_parser("report", help="summarize a trace file")
    rep.add_argument("--trace", required=True, help="trace CSV produced by flash run")
    rep.add_argument("--csv", default=None, help="write the best-so-far series here")
    return parser


def _run(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    cfg = BudgetConfig(
        t_total_s=args.t_total,
        t_init=PhaseBudget.parse(args.t_init),
        t_prune=PhaseBudget.parse(args.t_prune),
        per_run_timeout_s=args.per_run_timeout,
        top_r=args.top_r,
        xi=args.xi,
        ridge_lambda=args.ridge_lambda,
        cache_budget_bytes=args.cache_bytes,
        candidate_budget=args.candidate_budget,
        seed=args.seed,
    )
    executor = None
    close = lambda: None  # noqa: E731
    if args.executor == "synthetic":
        executor = make_synthetic_executor(spec, rng=cfg.seed, noise_sd=args.noise_sd)
    elif args.executor.startswith("subprocess:"):
        command = args.executor[len("subprocess:") :]
        executor = spawn_external(command, spec)
        close = executor.close
    else:
        raise ConfigParseError(
            f'unknown executor {args.executor!r}; use "synthetic" or subprocess:"<cmd>"'
        )
    try:
        outcome = run_flash(spec, executor, cfg, trace_out=args.trace_out)
    finally:
        close()
    print(f"runs: {sum(outcome.phase_runs.values())} "
          f"(phase1 {outcome.phase_runs[1]}, phase2 {outcome.phase_runs[2]}, phase3 {outcome.phase_runs[3]})")
    if outcome.best_path is not None:
        print(f"best metric: {outcome.best_metric:.6g}")
        print(f"best path:   {outcome.best_path.key()}")
        print(f"best hyperparams: {outcome.best_assignment}")
    if outcome.best_was_pruned_away:
        print(
            "note: a configuration outside the pruned subgraph scored "
            f"{outcome.global_best_metric:.6g}; it was excluded from the outcome"
        )
    print(f"trace written to {args.trace_out}")
    return 0


def _report(args: argparse.Namespace) -> int:
    summary = report(args.trace, csv_out=args.csv)
    print(summary.text())
    if args.csv:
        print(f"series written to {args.csv}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _run(args)
        return _report(args)
    except KeyboardInterrupt:
        print("interrupted; partial trace flushed", file=sys.stderr)
        return 130
    except ConfigParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FlashError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
