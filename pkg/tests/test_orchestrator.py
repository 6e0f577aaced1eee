"""Three-phase search loop: budgets, phases, pruning, traces, reports."""

import numpy as np
import pytest

from flashopt.benchmarks import default_benchmark_spec
from flashopt.cache import CachePool
from flashopt.errors import BudgetTooSmall, ConfigParseError, TraceParseError
from flashopt.executor import SyntheticExecutor, make_synthetic
from flashopt.graph import encode_path, enumerate_paths, prune_to_subgraph
from flashopt.orchestrator import (
    BudgetConfig,
    PhaseBudget,
    RunRecord,
    TuningOutcome,
    _Clock,
    _SearchState,
    _seed_history,
    phase1_initialize,
    random_search,
    report,
    run_flash,
)
from flashopt.trace import TraceRow, TraceWriter, read_trace


def synthetic(spec, seed=0, noise_sd=0.0):
    return SyntheticExecutor(make_synthetic(spec, rng=seed, noise_sd=noise_sd))


# ---------------------------------------------------------------------------
# budget plumbing


def test_phase_budget_parse_iterations_and_seconds():
    assert PhaseBudget.parse("30") == PhaseBudget.iterations(30)
    assert PhaseBudget.parse("30s") == PhaseBudget.seconds(30.0)
    assert PhaseBudget.parse(" 2.5s ") == PhaseBudget.seconds(2.5)


@pytest.mark.parametrize("text", ["junk", "", "3.5", "0", "-4", "-1s", "0s"])
def test_phase_budget_parse_rejects_garbage(text):
    with pytest.raises(ConfigParseError):
        PhaseBudget.parse(text)


def test_budget_config_validation():
    with pytest.raises(ConfigParseError):
        BudgetConfig(t_total_s=0.0)
    with pytest.raises(ConfigParseError):
        BudgetConfig(t_total_s=10.0, top_r=0)
    with pytest.raises(ConfigParseError):
        BudgetConfig(t_total_s=10.0, per_run_timeout_s=0.0)
    with pytest.raises(ConfigParseError):
        BudgetConfig(t_total_s=10.0, ridge_lambda=0.0)
    with pytest.raises(ConfigParseError):
        BudgetConfig(t_total_s=10.0, cache_budget_bytes=-1)
    with pytest.raises(ConfigParseError):
        BudgetConfig(t_total_s=10.0, candidate_budget=0)


def test_simulated_clock_charges_a_floor_per_run():
    clock = _Clock("simulated")
    clock.charge(0.0)
    assert clock.now() == pytest.approx(0.01)
    clock.charge(2.0)
    assert clock.now() == pytest.approx(2.01)


# ---------------------------------------------------------------------------
# phase 1


def test_phase1_runs_exactly_the_iteration_budget(toy_2x3):
    cfg = BudgetConfig(t_total_s=1e9, t_init=PhaseBudget.iterations(1))
    state = phase1_initialize(toy_2x3, synthetic(toy_2x3), CachePool(), cfg, rng=0)
    assert len(state.records) == 1
    assert state.metric_model is not None
    assert state.cost_model is not None


def test_phase1_design_satisfies_the_trace_identity():
    spec = default_benchmark_spec()
    cfg = BudgetConfig(t_total_s=1e9, t_init=PhaseBudget.iterations(30))
    state = phase1_initialize(spec, synthetic(spec), CachePool(), cfg, rng=0)
    assert len(state.records) == 30
    design = state.observations().design
    gram = design.T @ design
    assert int(round(np.trace(gram))) == 30 * spec.num_steps


def test_phase1_with_exhausted_clock_raises(toy_2x3):
    clock = _Clock("simulated")
    clock.charge(100.0)
    cfg = BudgetConfig(t_total_s=50.0)
    with pytest.raises(BudgetTooSmall):
        phase1_initialize(toy_2x3, synthetic(toy_2x3), CachePool(), cfg, 0, clock=clock)


def test_all_runs_timing_out_ratchets_the_penalty_metric(toy_2x3):
    bench = make_synthetic(toy_2x3, rng=0, noise_sd=0.0)
    floor = min(bench.true_cost.values())
    cfg = BudgetConfig(
        t_total_s=1e9,
        t_init=PhaseBudget.iterations(3),
        per_run_timeout_s=floor / 2.0,
    )
    state = phase1_initialize(toy_2x3, SyntheticExecutor(bench), CachePool(), cfg, rng=0)
    assert [r.metric for r in state.records] == [1.0, 2.0, 3.0]
    assert all(r.cost_s == cfg.per_run_timeout_s for r in state.records)


# ---------------------------------------------------------------------------
# full runs


def small_cfg(**kwargs):
    defaults = dict(
        t_total_s=60.0,
        t_init=PhaseBudget.iterations(6),
        t_prune=PhaseBudget.iterations(6),
        top_r=3,
        seed=0,
    )
    defaults.update(kwargs)
    return BudgetConfig(**defaults)


def test_phases_run_in_order_with_contiguous_indices(toy_2x3):
    out = run_flash(toy_2x3, synthetic(toy_2x3), small_cfg())
    assert out.phase_runs[1] == 6
    assert out.phase_runs[2] == 6
    assert out.phase_runs[3] >= 1
    phases = [r.phase for r in out.rows]
    assert phases == sorted(phases)
    assert [r.iter for r in out.rows] == list(range(1, len(out.rows) + 1))


def test_best_so_far_is_a_running_minimum_and_clock_never_rewinds(toy_2x3):
    out = run_flash(toy_2x3, synthetic(toy_2x3, noise_sd=0.02), small_cfg())
    best = float("inf")
    prev_wall = 0.0
    for row in out.rows:
        best = min(best, row.metric)
        assert row.best_so_far == best
        assert row.wall_clock_s >= prev_wall
        prev_wall = row.wall_clock_s


def test_tiny_total_budget_stops_after_phase1_and_keeps_the_seed_record(toy_2x3):
    cfg = BudgetConfig(t_total_s=0.005, seed=0)
    out = run_flash(toy_2x3, synthetic(toy_2x3), cfg)
    assert out.phase_runs == {1: 1, 2: 0, 3: 0}
    assert len(out.rows) == 1
    assert out.best_metric == out.rows[0].metric
    assert out.best_path is not None
    assert out.pruned_spec is not None


def test_generous_top_r_prunes_nothing(toy_2x3):
    out = run_flash(toy_2x3, synthetic(toy_2x3), small_cfg(top_r=10))
    assert len(out.top_paths) == 6
    original = {p.step_indices for p in enumerate_paths(toy_2x3)}
    kept = {p.step_indices for p in enumerate_paths(out.pruned_spec)}
    assert kept == original


def test_noise_free_run_finds_the_optimal_path_and_floor(toy_2x3):
    bench = make_synthetic(toy_2x3, rng=3, noise_sd=0.0)
    cfg = small_cfg(t_total_s=120.0, t_init=PhaseBudget.iterations(8), t_prune=PhaseBudget.iterations(8))
    out = run_flash(toy_2x3, SyntheticExecutor(bench), cfg)
    true = bench.optimal_path()
    assert any(p.step_indices == true.step_indices for p in out.top_paths)
    # no hyperparameters on this spec, so the floor is reachable exactly
    assert out.best_metric == pytest.approx(bench.path_floor(true), abs=1e-12)
    assert out.best_path.algorithm_ids == true.algorithm_ids


def test_search_tunes_hyperparameters_close_to_the_optimum(hp_spec):
    bench = make_synthetic(hp_spec, rng=1, noise_sd=0.0)
    cfg = BudgetConfig(
        t_total_s=600.0,
        t_init=PhaseBudget.iterations(8),
        t_prune=PhaseBudget.iterations(8),
        top_r=4,
        seed=1,
    )
    out = run_flash(hp_spec, SyntheticExecutor(bench), cfg)
    _, _, floor = bench.optimum()
    assert out.best_metric <= floor + 1e-2


def test_phase3_records_stay_inside_the_pruned_space(toy_2x3):
    out = run_flash(toy_2x3, synthetic(toy_2x3), small_cfg(top_r=2))
    kept = {p.algorithm_ids for p in enumerate_paths(out.pruned_spec)}
    phase3 = [r for r in out.rows if r.phase == 3]
    assert phase3
    for row in phase3:
        assert tuple(row.path.split("-")) in kept


def test_same_seed_reproduces_the_full_trace(tmp_path, toy_2x3):
    cfg = small_cfg(seed=11)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run_flash(toy_2x3, synthetic(toy_2x3, noise_sd=0.02), cfg, trace_out=a)
    run_flash(toy_2x3, synthetic(toy_2x3, noise_sd=0.02), cfg, trace_out=b)
    assert a.read_bytes() == b.read_bytes()


def test_trace_file_round_trips_the_outcome_rows(tmp_path, toy_2x3):
    path = tmp_path / "trace.csv"
    out = run_flash(toy_2x3, synthetic(toy_2x3), small_cfg(), trace_out=path)
    assert read_trace(path) == list(out.rows)


def test_random_search_obeys_the_same_clock(toy_2x3):
    cfg = BudgetConfig(t_total_s=30.0, seed=5)
    out = random_search(toy_2x3, synthetic(toy_2x3), cfg)
    assert out.rows
    assert out.rows[-1].wall_clock_s >= 30.0
    assert out.rows[-2].wall_clock_s < 30.0
    assert out.phase_runs[1] == len(out.rows)
    assert out.top_paths == ()
    assert out.best_metric == min(r.metric for r in out.rows)


def test_outcome_flags_a_best_that_was_pruned_away(toy_2x3):
    paths = list(enumerate_paths(toy_2x3))
    outcome = TuningOutcome(
        best_path=paths[0],
        best_assignment={},
        best_metric=0.5,
        rows=(),
        top_paths=(paths[0],),
        pruned_spec=None,
        global_best_metric=0.3,
        phase_runs={1: 0, 2: 0, 3: 0},
    )
    assert outcome.best_was_pruned_away
    fair = TuningOutcome(
        best_path=paths[0],
        best_assignment={},
        best_metric=0.3,
        rows=(),
        top_paths=(paths[0],),
        pruned_spec=None,
        global_best_metric=0.3,
        phase_runs={1: 0, 2: 0, 3: 0},
    )
    assert not fair.best_was_pruned_away


def test_seed_history_reencodes_only_surviving_paths(toy_2x3):
    keep = encode_path(toy_2x3, ["v1", "w1"])
    pruned = prune_to_subgraph(toy_2x3, [keep])
    state = _SearchState(spec=toy_2x3)
    state.records = [
        RunRecord(index=1, phase=1, path=keep, assignment={}, metric=0.5, cost_s=0.1),
        RunRecord(
            index=2,
            phase=2,
            path=encode_path(toy_2x3, ["v2", "w3"]),
            assignment={},
            metric=0.2,
            cost_s=0.1,
        ),
    ]
    history = _seed_history(pruned, state)
    assert len(history) == 1
    record = history.records[0]
    assert record.path.algorithm_ids == ("v1", "w1")
    assert len(record.path.onehot) == pruned.num_algorithms
    assert record.metric == 0.5


# ---------------------------------------------------------------------------
# reporting


def write_rows(path, rows):
    writer = TraceWriter(path)
    for row in rows:
        writer.write(row)
    writer.close()


def sample_rows():
    return [
        TraceRow(1, 1, 0.5, "v1-w1", "{}", 0.9, 0.5, 0.9, 0, 2),
        TraceRow(2, 2, 1.5, "v2-w1", "{}", 0.4, 1.0, 0.4, 1, 1),
        TraceRow(3, 3, 2.0, "v2-w2", "{}", 0.6, 0.5, 0.4, 2, 0),
    ]


def test_report_summarizes_a_trace(tmp_path):
    path = tmp_path / "t.csv"
    write_rows(path, sample_rows())
    summary = report(path)
    assert summary.n_rows == 3
    assert summary.phase_counts == {1: 1, 2: 1, 3: 1}
    assert summary.best_metric == 0.4
    assert summary.best_path == "v2-w1"
    assert summary.total_cost_s == pytest.approx(2.0)
    assert summary.final_wall_clock_s == 2.0
    assert summary.cache_hits == 3
    assert summary.cache_misses == 3
    assert summary.hit_rate == pytest.approx(0.5)
    assert summary.series == ((0.5, 0.9, 1), (1.5, 0.4, 2), (2.0, 0.4, 3))
    text = summary.text()
    assert "runs: 3" in text
    assert "0.4" in text


def test_report_writes_the_convergence_csv(tmp_path):
    trace = tmp_path / "t.csv"
    out = tmp_path / "series.csv"
    write_rows(trace, sample_rows())
    report(trace, csv_out=out)
    lines = out.read_text().splitlines()
    assert lines[0] == "wall_clock_s,best_so_far,phase"
    assert lines[1] == "0.5,0.9,1"
    assert len(lines) == 4


def test_report_on_empty_trace_fails(tmp_path):
    path = tmp_path / "empty.csv"
    TraceWriter(path).close()  # header only
    with pytest.raises(TraceParseError):
        report(path)


def test_report_on_missing_file_fails(tmp_path):
    with pytest.raises(TraceParseError):
        report(tmp_path / "absent.csv")


def test_hit_rate_with_no_traffic_is_zero():
    path_rows = [TraceRow(1, 1, 0.1, "p", "{}", 0.5, 0.1, 0.5, 0, 0)]
    summary_rows = tuple((r.wall_clock_s, r.best_so_far, r.phase) for r in path_rows)
    from flashopt.orchestrator import ReportSummary

    summary = ReportSummary(
        n_rows=1,
        phase_counts={1: 1},
        best_metric=0.5,
        best_path="p",
        total_cost_s=0.1,
        final_wall_clock_s=0.1,
        cache_hits=0,
        cache_misses=0,
        series=summary_rows,
    )
    assert summary.hit_rate == 0.0
