"""Density-ratio fine tuner: splits, smoothing, KDEs, sampling, updates."""

import math

import numpy as np
import pytest
from scipy import stats

from flashopt.errors import EmptyHistory
from flashopt.finetune import (
    BANDWIDTH_RANGE_FLOOR,
    HistoryRecord,
    HistorySet,
    _NumericDensity,
    _sample_path,
    _sample_paths_batch,
    _score,
    _score_batch,
    build_model,
    propose,
    update,
)
from flashopt.graph import (
    default_hyperparams,
    encode_path,
    sample_random_hyperparams,
    sample_random_path,
    validate_assignment,
)


def rec(spec, ids, metric, assignment=None):
    return HistoryRecord(
        path=encode_path(spec, ids), assignment=assignment or {}, metric=metric
    )


def history_of(spec, *records):
    return HistorySet(spec=spec, records=tuple(records))


# ---------------------------------------------------------------------------
# splitting and smoothing


def test_good_set_size_is_ceil_gamma_n(square_2x2):
    def model_with(n, gamma=0.25):
        records = [rec(square_2x2, ["a1", "b1"], 0.1 * i) for i in range(n)]
        return build_model(history_of(square_2x2, *records), gamma=gamma)

    assert model_with(8).n_good == 2
    assert model_with(1).n_good == 1
    assert model_with(3).n_good == 1
    assert model_with(4).n_good == 1
    assert model_with(5).n_good == 2
    assert model_with(10, gamma=0.5).n_good == 5
    assert model_with(2, gamma=0.9).n_good == 2


def test_good_partition_holds_the_lowest_metrics(square_2x2):
    records = [
        rec(square_2x2, ["a1", "b1"], 0.9),
        rec(square_2x2, ["a2", "b2"], 0.1),
        rec(square_2x2, ["a1", "b2"], 0.5),
        rec(square_2x2, ["a2", "b1"], 0.3),
    ]
    model = build_model(history_of(square_2x2, *records), gamma=0.5)
    assert model.n_good == 2
    assert [r.metric for r in model.ordered] == [0.1, 0.3, 0.5, 0.9]
    # good saw a2 twice and never a1
    np.testing.assert_array_equal(model.good.step_counts[0], [0.0, 2.0])
    np.testing.assert_array_equal(model.bad.step_counts[0], [2.0, 0.0])


def test_add_one_smoothing_on_step_choices(square_2x2):
    records = [rec(square_2x2, ["a1", "b1"], 0.1), rec(square_2x2, ["a1", "b1"], 0.2)]
    model = build_model(history_of(square_2x2, *records), gamma=0.9)
    np.testing.assert_allclose(model.good.step_probs[0], [0.75, 0.25])
    np.testing.assert_allclose(model.good.step_probs[1], [0.75, 0.25])
    # the empty bad partition falls back to uniform
    np.testing.assert_allclose(model.bad.step_probs[0], [0.5, 0.5])


def test_step_probs_always_sum_to_one(hp_spec):
    gen = np.random.default_rng(0)
    records = []
    for i in range(12):
        path = sample_random_path(hp_spec, gen)
        records.append(
            HistoryRecord(
                path=path,
                assignment=sample_random_hyperparams(hp_spec, path, gen),
                metric=float(gen.uniform()),
            )
        )
    model = build_model(history_of(hp_spec, *records))
    for part in (model.good, model.bad):
        for probs in part.step_probs:
            assert probs.sum() == pytest.approx(1.0)
            assert (probs > 0).all()


def test_categorical_smoothing_counts_observed_choices(hp_spec):
    a = {"prep": {"alpha": 0.5, "lr": 0.01}, "model": {"depth": 3, "loss": "hinge"}}
    b = {"prep": {"alpha": 0.4, "lr": 0.02}, "model": {"depth": 4, "loss": "hinge"}}
    records = [
        rec(hp_spec, ["prep", "model"], 0.1, a),
        rec(hp_spec, ["prep", "model"], 0.2, b),
    ]
    model = build_model(history_of(hp_spec, *records), gamma=0.9)
    # hinge seen twice, square and logit unseen: (2+1)/5, 1/5, 1/5
    np.testing.assert_allclose(
        model.good.categorical[("model", "loss")], [0.6, 0.2, 0.2]
    )


def test_empty_history_is_rejected(square_2x2):
    with pytest.raises(EmptyHistory):
        build_model(history_of(square_2x2))


def test_gamma_out_of_range_is_rejected(square_2x2):
    h = history_of(square_2x2, rec(square_2x2, ["a1", "b1"], 0.1))
    with pytest.raises(ValueError):
        build_model(h, gamma=0.0)
    with pytest.raises(ValueError):
        build_model(h, gamma=1.0)


# ---------------------------------------------------------------------------
# numeric densities


def test_kde_integrates_to_one():
    density = _NumericDensity([0.2, 0.25, 0.7, 0.71, 0.9], 0.0, 1.0)
    xs = np.linspace(0.0, 1.0, 20001)
    total = np.trapezoid(density.pdf_batch(xs), xs)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_kde_with_no_observations_is_uniform():
    density = _NumericDensity([], -2.0, 6.0)
    assert density.pdf(0.0) == pytest.approx(1.0 / 8.0)
    xs = np.linspace(-2.0, 6.0, 101)
    np.testing.assert_allclose(density.pdf_batch(xs), 1.0 / 8.0)


def test_bandwidth_never_collapses_on_repeated_values():
    density = _NumericDensity([0.5] * 20, 0.0, 1.0)
    assert density.bandwidth == pytest.approx(BANDWIDTH_RANGE_FLOOR)
    assert math.isfinite(density.pdf(0.5))
    # a point mass plus the uniform floor still covers the whole range
    assert density.pdf(0.01) > 0


def test_density_floor_keeps_far_points_positive():
    density = _NumericDensity([0.5], 0.0, 100.0)
    # 0.25 * uniform is the floor far from the only kernel
    assert density.pdf(99.0) == pytest.approx(0.25 / 100.0, rel=1e-6)
    assert density.logpdf(99.0) == pytest.approx(math.log(0.25 / 100.0), rel=1e-6)


def test_samples_respect_bounds():
    density = _NumericDensity([0.1, 0.9], 0.0, 1.0)
    gen = np.random.default_rng(1)
    draws = [density.sample(gen) for _ in range(500)]
    assert all(0.0 <= d <= 1.0 for d in draws)
    batch = density.sample_batch(500, np.random.default_rng(2))
    assert ((batch >= 0.0) & (batch <= 1.0)).all()


def test_batch_sampler_draws_from_the_same_law():
    density = _NumericDensity([0.2, 0.21, 0.8], 0.0, 1.0)
    gen = np.random.default_rng(3)
    scalar = np.array([density.sample(gen) for _ in range(4000)])
    batch = density.sample_batch(4000, np.random.default_rng(4))
    result = stats.ks_2samp(scalar, batch)
    assert result.pvalue > 0.01


def test_pdf_batch_matches_scalar_pdf():
    density = _NumericDensity(list(np.random.default_rng(5).uniform(size=50)), 0.0, 1.0)
    xs = np.linspace(0.0, 1.0, 97)
    np.testing.assert_allclose(
        density.pdf_batch(xs), [density.pdf(float(x)) for x in xs], rtol=1e-12
    )


def test_kde_thinning_keeps_the_density_close():
    gen = np.random.default_rng(6)
    values = np.concatenate([gen.normal(0.3, 0.05, 400), gen.normal(0.7, 0.05, 400)])
    values = np.clip(values, 0.0, 1.0)
    thinned = _NumericDensity(values, 0.0, 1.0)
    assert len(thinned.centers) == 256
    full = _NumericDensity(values[np.argsort(values)], 0.0, 1.0, assume_sorted=True)
    xs = np.linspace(0.0, 1.0, 201)
    np.testing.assert_allclose(thinned.pdf_batch(xs), full.pdf_batch(xs), rtol=0.05, atol=0.05)


# ---------------------------------------------------------------------------
# path sampling


def model_dominated_by(spec, good_ids, bad_ids, n_good=30, n_bad=10):
    records = [rec(spec, good_ids, 0.1 + 0.001 * i) for i in range(n_good)]
    records += [rec(spec, bad_ids, 0.9 + 0.001 * i) for i in range(n_bad)]
    gamma = n_good / len(records)
    return build_model(history_of(spec, *records), gamma=gamma)


def test_path_sampler_follows_step_probs(square_2x2):
    model = model_dominated_by(square_2x2, ["a1", "b1"], ["a2", "b2"])
    gen = np.random.default_rng(7)
    draws = _sample_paths_batch(square_2x2, model.good.step_probs, gen, 5000)
    counts = {}
    for p in draws:
        counts[p.step_indices] = counts.get(p.step_indices, 0) + 1
    expected = []
    observed = []
    for i in (0, 1):
        for j in (0, 1):
            expected.append(
                5000 * model.good.step_probs[0][i] * model.good.step_probs[1][j]
            )
            observed.append(counts.get((i, j), 0))
    result = stats.chisquare(observed, expected)
    assert result.pvalue > 0.01


def test_scalar_and_batch_path_samplers_agree_in_law(square_2x2):
    model = model_dominated_by(square_2x2, ["a1", "b1"], ["a2", "b2"])
    gen = np.random.default_rng(8)
    scalar = [_sample_path(square_2x2, model.good.step_probs, gen) for _ in range(4000)]
    batch = _sample_paths_batch(square_2x2, model.good.step_probs, np.random.default_rng(9), 4000)

    def freq(paths):
        out = {}
        for p in paths:
            out[p.step_indices] = out.get(p.step_indices, 0) + 1
        return out

    a, b = freq(scalar), freq(batch)
    table = np.array([[a.get(k, 0) for k in sorted(set(a) | set(b))],
                      [b.get(k, 0) for k in sorted(set(a) | set(b))]])
    result = stats.chi2_contingency(table)
    assert result.pvalue > 0.01


def test_sampled_paths_respect_restricted_edges(restricted_2x3):
    records = [rec(restricted_2x3, ["v1", "w1"], 0.1), rec(restricted_2x3, ["v2", "w3"], 0.2)]
    model = build_model(history_of(restricted_2x3, *records), gamma=0.9)
    gen = np.random.default_rng(10)
    for path in _sample_paths_batch(restricted_2x3, model.good.step_probs, gen, 2000):
        assert (path.algorithm_ids[0], path.algorithm_ids[1]) != ("v1", "w3")


# ---------------------------------------------------------------------------
# scoring and proposals


def random_history(spec, n, seed):
    gen = np.random.default_rng(seed)
    records = []
    for _ in range(n):
        path = sample_random_path(spec, gen)
        records.append(
            HistoryRecord(
                path=path,
                assignment=sample_random_hyperparams(spec, path, gen),
                metric=float(gen.uniform()),
            )
        )
    return history_of(spec, *records)


def test_score_batch_matches_scalar_score(hp_spec):
    model = build_model(random_history(hp_spec, 20, seed=11))
    gen = np.random.default_rng(12)
    candidates = []
    for _ in range(30):
        path = sample_random_path(hp_spec, gen)
        candidates.append((path, sample_random_hyperparams(hp_spec, path, gen)))
    batch = _score_batch(hp_spec, model, candidates)
    scalar = [_score(hp_spec, model, p, a) for p, a in candidates]
    np.testing.assert_allclose(batch, scalar, rtol=1e-9, atol=1e-9)


def test_proposals_concentrate_on_the_dominant_path(square_2x2):
    model = model_dominated_by(square_2x2, ["a1", "b1"], ["a2", "b2"])
    hits = 0
    for i in range(200):
        path, _ = propose(model, n_candidates=8, rng=i)
        hits += path.algorithm_ids == ("a1", "b1")
    assert hits > 180


def test_propose_on_single_path_spec_returns_it(single_path_spec):
    model = build_model(
        history_of(single_path_spec, rec(single_path_spec, ["only-a", "only-b"], 0.3))
    )
    path, assignment = propose(model, rng=0)
    assert path.algorithm_ids == ("only-a", "only-b")
    assert assignment == {}


def test_same_seed_gives_identical_proposal(hp_spec):
    model = build_model(random_history(hp_spec, 15, seed=13))
    a = propose(model, rng=21)
    b = propose(model, rng=21)
    assert a[0].step_indices == b[0].step_indices
    assert a[1] == b[1]


def test_shifting_all_metrics_changes_nothing(hp_spec):
    base = random_history(hp_spec, 15, seed=14)
    shifted = history_of(
        hp_spec,
        *[
            HistoryRecord(path=r.path, assignment=r.assignment, metric=r.metric + 100.0)
            for r in base.records
        ],
    )
    a = propose(build_model(base), rng=3)
    b = propose(build_model(shifted), rng=3)
    assert a[0].step_indices == b[0].step_indices
    assert a[1] == b[1]


@pytest.mark.parametrize("seed", range(8))
def test_proposals_are_always_valid_configurations(restricted_2x3, hp_spec, seed):
    for spec in (restricted_2x3, hp_spec):
        model = build_model(random_history(spec, 10, seed=100 + seed))
        path, assignment = propose(model, rng=seed)
        validate_assignment(spec, path, assignment)  # raises on any violation
        for aid in path.algorithm_ids:
            if spec.algorithm(aid).hyperparams:
                assert set(assignment[aid]) == {
                    h.name for h in spec.algorithm(aid).hyperparams
                }


def test_score_prefers_configurations_near_good_mass(hp_spec):
    good_assignment = {"prep": {"alpha": 0.2, "lr": 0.01}, "model": {"depth": 2, "loss": "hinge"}}
    bad_assignment = {"prep": {"alpha": 0.9, "lr": 0.5}, "model": {"depth": 7, "loss": "logit"}}
    records = [
        rec(hp_spec, ["prep", "model"], 0.1 + i * 0.01, good_assignment) for i in range(5)
    ] + [rec(hp_spec, ["prep", "model"], 0.9 + i * 0.01, bad_assignment) for i in range(5)]
    model = build_model(history_of(hp_spec, *records), gamma=0.5)
    path = encode_path(hp_spec, ["prep", "model"])
    near_good = _score(hp_spec, model, path, good_assignment)
    near_bad = _score(hp_spec, model, path, bad_assignment)
    assert near_good > near_bad


# ---------------------------------------------------------------------------
# incremental updates


def test_update_matches_rebuild_with_ties(hp_spec):
    gen = np.random.default_rng(77)
    pool = [0.1, 0.2, 0.2, 0.3, 0.5, 0.9]
    records = []
    for i in range(40):
        path = sample_random_path(hp_spec, gen)
        metric = pool[i % len(pool)] if i % 3 else float(gen.uniform())
        records.append(
            HistoryRecord(
                path=path,
                assignment=sample_random_hyperparams(hp_spec, path, gen),
                metric=metric,
            )
        )
    probes = []
    for _ in range(3):
        path = sample_random_path(hp_spec, gen)
        probes.append((path, sample_random_hyperparams(hp_spec, path, gen)))

    inc = build_model(history_of(hp_spec, records[0]))
    for i in range(1, len(records)):
        inc = update(inc, records[i])
        ref = build_model(history_of(hp_spec, *records[: i + 1]))
        assert inc.n_good == ref.n_good
        assert [r.metric for r in inc.ordered] == [r.metric for r in ref.ordered]
        for part_inc, part_ref in ((inc.good, ref.good), (inc.bad, ref.bad)):
            for a, b in zip(part_inc.step_probs, part_ref.step_probs):
                np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
            for key in part_ref.categorical:
                np.testing.assert_allclose(
                    part_inc.categorical[key], part_ref.categorical[key], atol=1e-12
                )
            for key in part_ref.buckets:
                np.testing.assert_array_equal(part_inc.buckets[key], part_ref.buckets[key])
        for path, assignment in probes:
            assert _score(hp_spec, inc, path, assignment) == pytest.approx(
                _score(hp_spec, ref, path, assignment), abs=1e-9
            )


def test_adding_a_worse_record_leaves_good_untouched(square_2x2):
    records = [rec(square_2x2, ["a1", "b1"], 0.1 * (i + 1)) for i in range(9)]
    model = build_model(history_of(square_2x2, *records))  # n_good = ceil(2.25) = 3
    before = [c.copy() for c in model.good.step_counts]
    worse = rec(square_2x2, ["a2", "b2"], 99.0)
    updated = update(model, worse)
    assert updated.n_good == 3  # ceil(0.25 * 10) stays 3
    for a, b in zip(updated.good.step_counts, before):
        np.testing.assert_array_equal(a, b)
    assert updated.ordered[-1].metric == 99.0


def test_adding_a_strictly_best_record_enters_good(square_2x2):
    records = [rec(square_2x2, ["a1", "b1"], 0.1 * (i + 1)) for i in range(9)]
    model = build_model(history_of(square_2x2, *records))
    best = rec(square_2x2, ["a2", "b2"], 0.001)
    updated = update(model, best)
    assert updated.ordered[0].metric == 0.001
    assert updated.n_good == 3
    # the newcomer sits in good: a2/b2 each counted once there
    assert updated.good.step_counts[0][1] == 1.0
    assert updated.good.step_counts[1][1] == 1.0
    # and good still holds exactly n_good records
    assert updated.good.step_counts[0].sum() == updated.n_good


def test_update_handles_boundary_promotion(square_2x2):
    # 8 -> 9 records moves ceil(gamma n) from 2 to 3: the best bad record
    # crosses into good even though the newcomer lands in bad
    records = [rec(square_2x2, ["a1", "b1"], float(i)) for i in range(8)]
    model = build_model(history_of(square_2x2, *records))
    assert model.n_good == 2
    updated = update(model, rec(square_2x2, ["a2", "b2"], 50.0))
    assert updated.n_good == 3
    ref = build_model(
        history_of(square_2x2, *records, rec(square_2x2, ["a2", "b2"], 50.0))
    )
    for a, b in zip(updated.good.step_counts, ref.good.step_counts):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(updated.bad.step_counts, ref.bad.step_counts):
        np.testing.assert_array_equal(a, b)
