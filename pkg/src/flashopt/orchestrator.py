"""Three-phase budgeted search over a pipeline space.

Phase 1 spreads an initial batch of runs across the space with the
greedy design criterion, so the linear models start from informative
coverage. Phase 2 runs the cost-aware acquisition loop, then ranks
every candidate path with the exploration bonus turned off and prunes
the space to the top r. Phase 3 fine-tunes inside the pruned space
with the density-ratio tuner until the total clock runs out.

All phases share one cache pool, one RNG stream, and one trace file.
Budgets for phases 1 and 2 may be iteration counts or seconds; the
total budget is always seconds, measured on a simulated clock when
the executor declares one.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .cache import CachePool, DEFAULT_CACHE_BUDGET_BYTES, run_pipeline_with_cache
from .canonical import canonical_json
from .design import OnlineDesigner, generate_candidates
from .errors import BudgetTooSmall, ConfigParseError, StepTimeout, TraceParseError
from .executor import StepExecutor
from .finetune import (
    DensityModel,
    HistoryRecord,
    HistorySet,
    build_model,
    propose,
    update,
)
from .graph import (
    HyperparamAssignment,
    PipelinePath,
    PipelineSpec,
    RngLike,
    as_generator,
    count_paths,
    encode_path,
    enumerate_paths,
    is_valid_path,
    prune_to_subgraph,
    sample_random_hyperparams,
    sample_random_path,
)
from .surrogate import (
    CandidateSet,
    LinearSurrogate,
    ObservationSet,
    fit_cost_model,
    fit_ridge,
    rank_paths_by_eips,
    select_next_path,
)
from .trace import NullTraceWriter, TraceRow, TraceWriter, read_trace

COST_FLOOR_S = 1e-9
# A run that is fully served from cache costs ~0 simulated seconds; the
# clock still charges a minimal dispatch overhead so a time budget can
# never buy unbounded iterations.
MIN_RUN_CHARGE_S = 0.01
TIMEOUT_PENALTY = 1.0


@dataclass(frozen=True)
class PhaseBudget:
    """Iteration-count or seconds allowance for one phase."""

    kind: str  # "iterations" or "seconds"
    amount: float

    def __post_init__(self):
        if self.kind not in ("iterations", "seconds"):
            raise ConfigParseError(f"unknown budget kind {self.kind!r}")
        if self.amount <= 0:
            raise ConfigParseError("budget must be positive")
        if self.kind == "iterations" and self.amount != int(self.amount):
            raise ConfigParseError("iteration budgets must be whole numbers")

    @classmethod
    def iterations(cls, n: int) -> "PhaseBudget":
        return cls(kind="iterations", amount=float(n))

    @classmethod
    def seconds(cls, s: float) -> "PhaseBudget":
        return cls(kind="seconds", amount=float(s))

    @classmethod
    def parse(cls, text: str) -> "PhaseBudget":
        """"30" means 30 iterations, "30s" means 30 seconds."""
        text = text.strip()
        try:
            if text.endswith("s"):
                return cls.seconds(float(text[:-1]))
            return cls.iterations(int(text))
        except ValueError as exc:
            raise ConfigParseError(f"cannot parse budget {text!r}: {exc}") from exc


@dataclass(frozen=True)
class BudgetConfig:
    t_total_s: float
    t_init: PhaseBudget = PhaseBudget.iterations(30)
    t_prune: PhaseBudget = PhaseBudget.iterations(30)
    per_run_timeout_s: float = 900.0
    top_r: int = 10
    xi: float = 100.0
    ridge_lambda: float = 1.0
    cache_budget_bytes: int = DEFAULT_CACHE_BUDGET_BYTES
    candidate_budget: int = 2048
    seed: int = 0

    def __post_init__(self):
        if self.t_total_s <= 0:
            raise ConfigParseError("t_total must be positive")
        if self.per_run_timeout_s <= 0:
            raise ConfigParseError("per_run_timeout must be positive")
        if self.top_r < 1:
            raise ConfigParseError("top_r must be at least 1")
        if self.candidate_budget < 1:
            raise ConfigParseError("candidate_budget must be at least 1")
        if self.ridge_lambda <= 0:
            raise ConfigParseError("ridge_lambda must be positive")
        if self.cache_budget_bytes < 0:
            raise ConfigParseError("cache budget must be nonnegative")


class _Clock:
    """Budget clock: wall time, or accumulated charges when simulated."""

    def __init__(self, mode: str):
        self.mode = mode
        self._start = time.monotonic()
        self._charged = 0.0

    def now(self) -> float:
        if self.mode == "simulated":
            return self._charged
        return time.monotonic() - self._start

    def charge(self, seconds: float) -> None:
        if self.mode == "simulated":
            self._charged += max(seconds, MIN_RUN_CHARGE_S)


@dataclass(frozen=True)
class RunRecord:
    index: int
    phase: int
    path: PipelinePath  # in the coordinates of the spec active that phase
    assignment: HyperparamAssignment
    metric: float
    cost_s: float


@dataclass
class _SearchState:
    """Everything accumulated across phases."""

    spec: PipelineSpec
    records: list[RunRecord] = field(default_factory=list)
    best_metric: float = float("inf")
    metric_model: LinearSurrogate | None = None
    cost_model: LinearSurrogate | None = None

    def observations(self) -> ObservationSet:
        rows = [r for r in self.records if r.phase in (1, 2)]
        return ObservationSet.from_paths(
            [r.path for r in rows],
            [r.metric for r in rows],
            [r.cost_s for r in rows],
        )


@dataclass(frozen=True)
class TuningOutcome:
    best_path: PipelinePath | None
    best_assignment: HyperparamAssignment | None
    best_metric: float
    rows: tuple[TraceRow, ...]
    top_paths: tuple[PipelinePath, ...]
    pruned_spec: PipelineSpec | None
    global_best_metric: float
    phase_runs: dict[int, int]

    @property
    def best_was_pruned_away(self) -> bool:
        return self.best_metric > self.global_best_metric


def _execute_one(
    state: _SearchState,
    executor: StepExecutor,
    pool: CachePool,
    cfg: BudgetConfig,
    clock: _Clock,
    writer,
    phase: int,
    path: PipelinePath,
    assignment: HyperparamAssignment,
) -> RunRecord:
    try:
        result = run_pipeline_with_cache(
            executor, path, assignment, pool, per_run_timeout_s=cfg.per_run_timeout_s
        )
        metric = result.metric
        cost = max(result.cost_seconds, COST_FLOOR_S)
        hits, misses = result.cache_hits, result.cache_misses
    except StepTimeout:
        worst = max((r.metric for r in state.records), default=0.0)
        metric = worst + TIMEOUT_PENALTY
        cost = cfg.per_run_timeout_s
        hits, misses = 0, 0
    clock.charge(cost)
    record = RunRecord(
        index=len(state.records) + 1,
        phase=phase,
        path=path,
        assignment=assignment,
        metric=metric,
        cost_s=cost,
    )
    state.records.append(record)
    state.best_metric = min(state.best_metric, metric)
    writer.write(
        TraceRow(
            iter=record.index,
            phase=phase,
            wall_clock_s=clock.now(),
            path=path.key(),
            hyperparams_json=canonical_json(assignment),
            metric=metric,
            cost_s=cost,
            best_so_far=state.best_metric,
            cache_hits=hits,
            cache_misses=misses,
        )
    )
    return record


def _refit(state: _SearchState, cfg: BudgetConfig) -> None:
    obs = state.observations()
    state.metric_model = fit_ridge(obs, ridge_lambda=cfg.ridge_lambda)
    state.cost_model = fit_cost_model(obs, ridge_lambda=cfg.ridge_lambda)


def _phase_should_continue(
    budget: PhaseBudget, runs_done: int, phase_start: float, clock: _Clock, cfg: BudgetConfig
) -> bool:
    if clock.now() >= cfg.t_total_s:
        return False
    if budget.kind == "iterations":
        return runs_done < int(budget.amount)
    return clock.now() - phase_start < budget.amount


def phase1_initialize(
    spec: PipelineSpec,
    executor: StepExecutor,
    pool: CachePool,
    cfg: BudgetConfig,
    rng: RngLike,
    writer=None,
    clock: _Clock | None = None,
    state: _SearchState | None = None,
) -> _SearchState:
    """Coverage-driven initial runs; fits the first linear models."""
    gen = as_generator(rng)
    writer = writer if writer is not None else NullTraceWriter()
    clock = clock if clock is not None else _Clock(executor.time_mode)
    state = state if state is not None else _SearchState(spec=spec)
    budget_b = max(2 * spec.num_algorithms, cfg.candidate_budget)
    designer = OnlineDesigner(generate_candidates(spec, budget_b, gen))
    start = clock.now()
    runs = 0
    while _phase_should_continue(cfg.t_init, runs, start, clock, cfg):
        path = designer.propose()
        designer.add(path)
        assignment = sample_random_hyperparams(spec, path, gen)
        _execute_one(state, executor, pool, cfg, clock, writer, 1, path, assignment)
        _refit(state, cfg)
        runs += 1
    if runs == 0:
        raise BudgetTooSmall("phase 1 completed zero runs")
    return state


def phase2_prune(
    spec: PipelineSpec,
    executor: StepExecutor,
    pool: CachePool,
    state: _SearchState,
    cfg: BudgetConfig,
    rng: RngLike,
    writer=None,
    clock: _Clock | None = None,
) -> tuple[PipelineSpec, tuple[PipelinePath, ...]]:
    """Cost-aware acquisition loop, then prune to the top-r subgraph."""
    gen = as_generator(rng)
    writer = writer if writer is not None else NullTraceWriter()
    clock = clock if clock is not None else _Clock(executor.time_mode)
    # enumerable spaces get one shared candidate pool; larger spaces
    # fall back to fresh samples inside each selection call
    pool_set = None
    if count_paths(spec) <= cfg.candidate_budget:
        pool_set = CandidateSet.from_paths(enumerate_paths(spec, limit=cfg.candidate_budget))
    start = clock.now()
    runs = 0
    while _phase_should_continue(cfg.t_prune, runs, start, clock, cfg):
        path = select_next_path(
            spec,
            state.metric_model,
            state.cost_model,
            state.best_metric,
            xi=cfg.xi,
            candidate_budget=cfg.candidate_budget,
            rng=gen,
            candidates=pool_set,
        )
        assignment = sample_random_hyperparams(spec, path, gen)
        _execute_one(state, executor, pool, cfg, clock, writer, 2, path, assignment)
        _refit(state, cfg)
        runs += 1
    top = rank_paths_by_eips(
        spec,
        state.metric_model,
        state.cost_model,
        state.best_metric,
        top_r=cfg.top_r,
        xi=0.0,
        candidate_budget=cfg.candidate_budget,
        rng=gen,
        candidates=pool_set,
    )
    return prune_to_subgraph(spec, top), tuple(top)


def _seed_history(pruned: PipelineSpec, state: _SearchState) -> HistorySet:
    seeded = []
    for rec in state.records:
        if rec.phase not in (1, 2):
            continue
        if is_valid_path(pruned, rec.path.algorithm_ids):
            seeded.append(
                HistoryRecord(
                    path=encode_path(pruned, rec.path.algorithm_ids),
                    assignment=rec.assignment,
                    metric=rec.metric,
                )
            )
    return HistorySet(spec=pruned, records=tuple(seeded))


def phase3_finetune(
    pruned: PipelineSpec,
    executor: StepExecutor,
    pool: CachePool,
    state: _SearchState,
    cfg: BudgetConfig,
    rng: RngLike,
    writer=None,
    clock: _Clock | None = None,
) -> tuple[HistorySet, int]:
    """Density-model loop inside the pruned space until the clock ends."""
    gen = as_generator(rng)
    writer = writer if writer is not None else NullTraceWriter()
    clock = clock if clock is not None else _Clock(executor.time_mode)
    history = _seed_history(pruned, state)
    model: DensityModel | None = build_model(history) if len(history) else None
    runs = 0
    while clock.now() < cfg.t_total_s:
        if model is None:
            path = sample_random_path(pruned, gen)
            assignment = sample_random_hyperparams(pruned, path, gen)
        else:
            path, assignment = propose(model, pruned, rng=gen)
        record = _execute_one(state, executor, pool, cfg, clock, writer, 3, path, assignment)
        new_rec = HistoryRecord(path=path, assignment=assignment, metric=record.metric)
        if model is None:
            model = build_model(history.extended(new_rec))
        else:
            model = update(model, new_rec)  # update carries the history along
        runs += 1
    return (model.history if model is not None else history), runs


def _best_in_subgraph(
    state: _SearchState, pruned: PipelineSpec
) -> tuple[PipelinePath | None, HyperparamAssignment | None, float]:
    best: RunRecord | None = None
    for rec in state.records:
        if rec.phase == 3 or is_valid_path(pruned, rec.path.algorithm_ids):
            if best is None or rec.metric < best.metric:
                best = rec
    if best is None:
        return None, None, float("inf")
    path = best.path if best.phase == 3 else encode_path(pruned, best.path.algorithm_ids)
    return path, best.assignment, best.metric


def run_flash(
    spec: PipelineSpec,
    executor: StepExecutor,
    cfg: BudgetConfig,
    trace_out: str | Path | None = None,
) -> TuningOutcome:
    """All three phases with a shared cache pool, RNG stream, and trace."""
    gen = as_generator(cfg.seed)
    pool = CachePool(cfg.cache_budget_bytes)
    clock = _Clock(executor.time_mode)
    writer = TraceWriter(trace_out) if trace_out is not None else NullTraceWriter()
    state = _SearchState(spec=spec)
    try:
        phase1_initialize(spec, executor, pool, cfg, gen, writer, clock, state)
        pruned, top = phase2_prune(spec, executor, pool, state, cfg, gen, writer, clock)
        phase3_finetune(pruned, executor, pool, state, cfg, gen, writer, clock)
    finally:
        writer.close()
    best_path, best_assignment, best_metric = _best_in_subgraph(state, pruned)
    phase_runs: dict[int, int] = {1: 0, 2: 0, 3: 0}
    for rec in state.records:
        phase_runs[rec.phase] += 1
    return TuningOutcome(
        best_path=best_path,
        best_assignment=best_assignment,
        best_metric=best_metric,
        rows=tuple(writer.rows),
        top_paths=top,
        pruned_spec=pruned,
        global_best_metric=state.best_metric,
        phase_runs=phase_runs,
    )


def random_search(
    spec: PipelineSpec,
    executor: StepExecutor,
    cfg: BudgetConfig,
    trace_out: str | Path | None = None,
) -> TuningOutcome:
    """Uniform-random baseline under the same budget accounting."""
    gen = as_generator(cfg.seed)
    pool = CachePool(cfg.cache_budget_bytes)
    clock = _Clock(executor.time_mode)
    writer = TraceWriter(trace_out) if trace_out is not None else NullTraceWriter()
    state = _SearchState(spec=spec)
    try:
        while clock.now() < cfg.t_total_s:
            path = sample_random_path(spec, gen)
            assignment = sample_random_hyperparams(spec, path, gen)
            _execute_one(state, executor, pool, cfg, clock, writer, 1, path, assignment)
    finally:
        writer.close()
    best = min(state.records, key=lambda r: r.metric, default=None)
    return TuningOutcome(
        best_path=best.path if best else None,
        best_assignment=best.assignment if best else None,
        best_metric=best.metric if best else float("inf"),
        rows=tuple(writer.rows),
        top_paths=(),
        pruned_spec=None,
        global_best_metric=state.best_metric,
        phase_runs={1: len(state.records), 2: 0, 3: 0},
    )


# ---------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class ReportSummary:
    n_rows: int
    phase_counts: dict[int, int]
    best_metric: float
    best_path: str
    total_cost_s: float
    final_wall_clock_s: float
    cache_hits: int
    cache_misses: int
    series: tuple[tuple[float, float, int], ...]  # (wall_clock_s, best_so_far, phase)

    @property
    def hit_rate(self) -> float:
        total = self.cache_hits + self.cache_misses
        return self.cache_hits / total if total else 0.0

    def text(self) -> str:
        lines = [
            f"runs: {self.n_rows}"
            + "".join(f"  phase{p}: {self.phase_counts.get(p, 0)}" for p in (1, 2, 3)),
            f"best metric: {self.best_metric:.6g}  on path: {self.best_path}",
            f"total run cost: {self.total_cost_s:.3f}s  clock at finish: {self.final_wall_clock_s:.3f}s",
            f"cache: {self.cache_hits} hits / {self.cache_misses} misses"
            f"  (hit rate {self.hit_rate:.1%})",
        ]
        return "\n".join(lines)


def report(trace_path: str | Path, csv_out: str | Path | None = None) -> ReportSummary:
    """Summarize a trace file; optionally dump the best-so-far series."""
    rows = read_trace(trace_path)
    phase_counts: dict[int, int] = {}
    best_metric = float("inf")
    best_path = ""
    series = []
    for row in rows:
        phase_counts[row.phase] = phase_counts.get(row.phase, 0) + 1
        if row.metric < best_metric:
            best_metric = row.metric
            best_path = row.path
        series.append((row.wall_clock_s, row.best_so_far, row.phase))
    summary = ReportSummary(
        n_rows=len(rows),
        phase_counts=phase_counts,
        best_metric=best_metric,
        best_path=best_path,
        total_cost_s=sum(r.cost_s for r in rows),
        final_wall_clock_s=rows[-1].wall_clock_s,
        cache_hits=sum(r.cache_hits for r in rows),
        cache_misses=sum(r.cache_misses for r in rows),
        series=tuple(series),
    )
    if csv_out is not None:
        with open(csv_out, "w", encoding="utf-8", newline="") as fh:
            fh.write("wall_clock_s,best_so_far,phase\n")
            for wall, best, phase in summary.series:
                fh.write(f"{wall!r},{best!r},{phase}\n")
    return summary
