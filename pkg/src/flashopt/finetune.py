"""Density-ratio fine tuner for the pruned space.

History is split at the gamma quantile of the metric into a good and a
bad partition. Each partition induces a generative model over
configurations: add-one smoothed categoricals for the per-step
algorithm choice (and for categorical hyperparameters), and a
Gaussian kernel density per numeric hyperparameter, truncated to its
bounds and mixed 3:1 with a uniform so no region ever has zero mass.
Log-scaled dimensions are modeled on their log10 axis.

A proposal draws candidates from the good model and keeps the one the
good/bad log-density ratio likes most. Only dimensions present on the
sampled path count toward the score.
"""

from __future__ import annotations

import bisect
import math
from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from typing import Any, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .errors import EmptyHistory
from .graph import (
    HyperparamAssignment,
    HyperparamSpec,
    PipelinePath,
    PipelineSpec,
    RngLike,
    as_generator,
    make_path,
)

DEFAULT_GAMMA = 0.25
DEFAULT_CANDIDATES = 24
KDE_WEIGHT = 0.75  # remainder goes to the uniform component
BANDWIDTH_RANGE_FLOOR = 0.01
# Above this many observations a dimension's KDE thins its components to
# an evenly spaced subsample of the sorted values (a quantile sketch).
# Bandwidth still comes from the full sample, so densities stay stable
# while evaluation cost stops growing with history length.
KDE_MAX_COMPONENTS = 256
_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class HistoryRecord:
    path: PipelinePath
    assignment: HyperparamAssignment
    metric: float


@dataclass(frozen=True)
class HistorySet:
    """Observed configurations within one (pruned) search space."""

    spec: PipelineSpec
    records: tuple[HistoryRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def extended(self, record: HistoryRecord) -> "HistorySet":
        return HistorySet(spec=self.spec, records=self.records + (record,))

    def __len__(self) -> int:
        return len(self.records)


@lru_cache(maxsize=4096)
def _thin_indices(n: int) -> np.ndarray:
    """Evenly spaced positions keeping KDE_MAX_COMPONENTS of n values."""
    return np.round(np.linspace(0, n - 1, KDE_MAX_COMPONENTS)).astype(int)


def _sorted_quantile(values: np.ndarray, q: float) -> float:
    """Linear-interpolated quantile of an already sorted array."""
    pos = (len(values) - 1) * q
    i = int(pos)
    frac = pos - i
    if frac == 0.0:
        return float(values[i])
    return float(values[i] * (1.0 - frac) + values[i + 1] * frac)


class _NumericDensity:
    """Truncated Gaussian KDE mixed with a uniform on canonical bounds.

    Past KDE_MAX_COMPONENTS observations the kernel centers are an
    evenly spaced subsample of the sorted values; the bandwidth keeps
    using every observation.
    """

    def __init__(
        self, observations: Sequence[float], lo: float, hi: float, assume_sorted: bool = False
    ):
        self.lo = float(lo)
        self.hi = float(hi)
        self.span = self.hi - self.lo
        values = np.asarray(observations, dtype=float)
        if not assume_sorted:
            values = np.sort(values)
        n = len(values)
        if n == 0:
            self.centers = values
            self.bandwidth = 0.0
            self._trunc_mass = np.empty(0)
            return
        mean = float(values.sum()) / n
        sd = math.sqrt(max(float(values @ values) / n - mean * mean, 0.0))
        if n >= 2:
            iqr_est = (_sorted_quantile(values, 0.75) - _sorted_quantile(values, 0.25)) / 1.34
            spread = min(sd, iqr_est) if iqr_est > 0 else sd
        else:
            spread = sd
        h = 0.9 * spread * n ** (-0.2)
        self.bandwidth = max(h, BANDWIDTH_RANGE_FLOOR * self.span)
        if n > KDE_MAX_COMPONENTS:
            self.centers = values[_thin_indices(n)]
        else:
            self.centers = values
        edges = ndtr((np.array([[self.lo], [self.hi]]) - self.centers) / self.bandwidth)
        self._cdf_a = edges[0]
        self._trunc_mass = np.maximum(edges[1] - edges[0], 1e-300)
        # fold kernel normalization, truncation mass, and the mean over
        # components into one weight vector
        self._inv_scale = 1.0 / (self.bandwidth * _SQRT_2PI * self._trunc_mass)
        self._mean_weights = self._inv_scale / len(self.centers)

    def _window(self, lo_x: float, hi_x: float) -> tuple[int, int]:
        """Index range of components within 10 bandwidths of [lo_x, hi_x].

        Kernels further out contribute below 1e-21 of their height and
        are dwarfed by the uniform floor, so skipping them changes
        nothing at working precision.
        """
        reach = 10.0 * self.bandwidth
        lo_i = int(np.searchsorted(self.centers, lo_x - reach))
        hi_i = int(np.searchsorted(self.centers, hi_x + reach))
        return lo_i, hi_i

    def pdf(self, x: float) -> float:
        uniform = 1.0 / self.span
        if len(self.centers) == 0:
            return uniform
        lo_i, hi_i = self._window(x, x)
        kde = 0.0
        if hi_i > lo_i:
            z = (x - self.centers[lo_i:hi_i]) / self.bandwidth
            kde = float(np.exp(-0.5 * z * z) @ self._mean_weights[lo_i:hi_i])
        return KDE_WEIGHT * kde + (1.0 - KDE_WEIGHT) * uniform

    def pdf_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=float)
        uniform = 1.0 / self.span
        if len(self.centers) == 0:
            return np.full(xs.shape, uniform)
        lo_i, hi_i = self._window(float(xs.min()), float(xs.max()))
        kde = 0.0
        if hi_i > lo_i:
            z = (xs[:, None] - self.centers[None, lo_i:hi_i]) / self.bandwidth
            kde = np.exp(-0.5 * z * z) @ self._mean_weights[lo_i:hi_i]
        return KDE_WEIGHT * kde + (1.0 - KDE_WEIGHT) * uniform

    def logpdf(self, x: float) -> float:
        return math.log(max(self.pdf(x), 1e-300))

    def sample(self, gen: np.random.Generator) -> float:
        if len(self.centers) == 0 or gen.uniform() >= KDE_WEIGHT:
            return float(gen.uniform(self.lo, self.hi))
        i = int(gen.integers(len(self.centers)))
        # inverse-cdf draw from the i-th truncated component
        u = self._cdf_a[i] + gen.uniform() * self._trunc_mass[i]
        x = self.centers[i] + self.bandwidth * float(ndtri(min(max(u, 1e-12), 1 - 1e-12)))
        return float(min(max(x, self.lo), self.hi))

    def sample_batch(self, count: int, gen: np.random.Generator) -> np.ndarray:
        """Draws with the same law as repeated sample() calls."""
        if len(self.centers) == 0:
            return gen.uniform(self.lo, self.hi, size=count)
        out = np.empty(count)
        from_kde = gen.random(count) < KDE_WEIGHT
        n_uniform = int(count - from_kde.sum())
        if n_uniform:
            out[~from_kde] = gen.uniform(self.lo, self.hi, size=n_uniform)
        n_kde = count - n_uniform
        if n_kde:
            comp = gen.integers(0, len(self.centers), size=n_kde)
            u = self._cdf_a[comp] + gen.random(n_kde) * self._trunc_mass[comp]
            x = self.centers[comp] + self.bandwidth * ndtri(np.clip(u, 1e-12, 1.0 - 1e-12))
            out[from_kde] = np.clip(x, self.lo, self.hi)
        return out


class _DensityStore:
    """Numeric densities keyed by (algorithm id, hyperparam name).

    Built lazily from the sorted buckets on first access. A partition
    copy refreshes the store instead of refitting: densities already
    built stay shared except on the dimensions whose bucket changed,
    so updates only pay for what later gets queried.
    """

    def __init__(
        self,
        bounds: dict[tuple[str, str], tuple[float, float]],
        buckets: dict[tuple[str, str], np.ndarray],
        built: dict[tuple[str, str], _NumericDensity] | None = None,
    ):
        self._bounds = bounds
        self._buckets = buckets
        self._built = {} if built is None else built

    def __getitem__(self, key: tuple[str, str]) -> _NumericDensity:
        density = self._built.get(key)
        if density is None:
            lo, hi = self._bounds[key]
            density = _NumericDensity(self._buckets[key], lo, hi, assume_sorted=True)
            self._built[key] = density
        return density

    def __contains__(self, key: tuple[str, str]) -> bool:
        return key in self._bounds

    def refreshed(
        self,
        buckets: dict[tuple[str, str], np.ndarray],
        changed: set[tuple[str, str]],
    ) -> "_DensityStore":
        kept = {k: v for k, v in self._built.items() if k not in changed}
        return _DensityStore(self._bounds, buckets, kept)


def _smoothed(counts: np.ndarray) -> np.ndarray:
    return (counts + 1.0) / (counts.sum() + len(counts))


@dataclass(frozen=True)
class _Partition:
    """One side of the good/bad split, as sampling distributions.

    Raw counts and sorted value buckets ride along so one record can be
    folded in or taken out without rebuilding the other dimensions.
    """

    step_counts: tuple[np.ndarray, ...]
    cat_counts: dict[tuple[str, str], np.ndarray]
    buckets: dict[tuple[str, str], np.ndarray]  # canonical axis, sorted
    step_probs: tuple[np.ndarray, ...]
    categorical: dict[tuple[str, str], np.ndarray]
    numeric: _DensityStore

    def with_added(self, spec: PipelineSpec, record: HistoryRecord) -> "_Partition":
        return self._shifted(spec, record, added=True)

    def with_removed(self, spec: PipelineSpec, record: HistoryRecord) -> "_Partition":
        return self._shifted(spec, record, added=False)

    def _shifted(self, spec: PipelineSpec, record: HistoryRecord, added: bool) -> "_Partition":
        sign = 1.0 if added else -1.0
        step_counts = tuple(c.copy() for c in self.step_counts)
        for k, j in enumerate(record.path.step_indices):
            step_counts[k][j] += sign
        cat_counts = dict(self.cat_counts)
        categorical = dict(self.categorical)
        buckets = dict(self.buckets)
        changed: set[tuple[str, str]] = set()
        for aid, values in record.assignment.items():
            alg = spec.algorithm(aid)
            for name, v in values.items():
                h = alg.hyperparam(name)
                key = (aid, name)
                if h.kind == "categorical":
                    counts = cat_counts[key].copy()
                    counts[h.choices.index(v)] += sign
                    cat_counts[key] = counts
                    categorical[key] = _smoothed(counts)
                else:
                    x = h.to_canonical(v)
                    b = buckets[key]
                    if added:
                        pos = int(np.searchsorted(b, x, side="right"))
                        nb = np.empty(len(b) + 1)
                        nb[:pos] = b[:pos]
                        nb[pos] = x
                        nb[pos + 1 :] = b[pos:]
                    else:
                        pos = int(np.searchsorted(b, x, side="left"))
                        nb = np.empty(len(b) - 1)
                        nb[:pos] = b[:pos]
                        nb[pos:] = b[pos + 1 :]
                    buckets[key] = nb
                    changed.add(key)
        return _Partition(
            step_counts=step_counts,
            cat_counts=cat_counts,
            buckets=buckets,
            step_probs=tuple(_smoothed(c) for c in step_counts),
            categorical=categorical,
            numeric=self.numeric.refreshed(buckets, changed),
        )


@dataclass(frozen=True)
class DensityModel:
    history: HistorySet
    gamma: float
    good: _Partition
    bad: _Partition
    n_good: int
    ordered: tuple[HistoryRecord, ...]  # by metric, ties in arrival order


def _build_partition(spec: PipelineSpec, records: Sequence[HistoryRecord]) -> _Partition:
    """One pass over the records fills every dimension's buckets."""
    step_counts = tuple(np.zeros(len(step.algorithms)) for step in spec.steps)
    observed: dict[tuple[str, str], list[Any]] = defaultdict(list)
    for rec in records:
        for k, j in enumerate(rec.path.step_indices):
            step_counts[k][j] += 1
        for aid, values in rec.assignment.items():
            for name, v in values.items():
                observed[(aid, name)].append(v)
    cat_counts: dict[tuple[str, str], np.ndarray] = {}
    categorical: dict[tuple[str, str], np.ndarray] = {}
    buckets: dict[tuple[str, str], np.ndarray] = {}
    bounds: dict[tuple[str, str], tuple[float, float]] = {}
    for step in spec.steps:
        for alg in step.algorithms:
            for h in alg.hyperparams:
                key = (alg.id, h.name)
                values = observed.get(key, [])
                if h.kind == "categorical":
                    counts = np.zeros(len(h.choices))
                    pos = {c: j for j, c in enumerate(h.choices)}
                    for v in values:
                        counts[pos[v]] += 1
                    cat_counts[key] = counts
                    categorical[key] = _smoothed(counts)
                else:
                    bounds[key] = h.canonical_bounds()
                    buckets[key] = np.sort(np.array([h.to_canonical(v) for v in values]))
    return _Partition(
        step_counts=step_counts,
        cat_counts=cat_counts,
        buckets=buckets,
        step_probs=tuple(_smoothed(c) for c in step_counts),
        categorical=categorical,
        numeric=_DensityStore(bounds, buckets),
    )


def build_model(history: HistorySet, gamma: float = DEFAULT_GAMMA) -> DensityModel:
    """Split history at the gamma quantile and fit both partitions."""
    if len(history) == 0:
        raise EmptyHistory("cannot build a density model from no records")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly between 0 and 1")
    ordered = sorted(history.records, key=lambda r: r.metric)
    n_good = max(1, math.ceil(gamma * len(ordered)))
    good, bad = ordered[:n_good], ordered[n_good:]
    return DensityModel(
        history=history,
        gamma=gamma,
        good=_build_partition(history.spec, good),
        bad=_build_partition(history.spec, bad),
        n_good=n_good,
        ordered=tuple(ordered),
    )


def _draw_index(cum: np.ndarray, gen: np.random.Generator) -> int:
    """Weighted pick from a cumulative-sum array."""
    pick = int(np.searchsorted(cum, gen.random() * cum[-1], side="right"))
    return min(pick, len(cum) - 1)


def _step_cum(
    spec: PipelineSpec, probs: tuple[np.ndarray, ...], step_index: int, prev: str | None
) -> np.ndarray:
    """Cumulative sampling weights for one step given the previous pick."""
    step = spec.steps[step_index]
    mask = np.zeros(len(step.algorithms), dtype=bool)
    for j, alg in enumerate(step.algorithms):
        ok = prev is None or (prev, alg.id) in spec.edges
        mask[j] = ok and spec._suffix_counts[alg.id] > 0
    weights = probs[step_index] * mask
    if weights.sum() <= 0:
        weights = mask.astype(float)
    return np.cumsum(weights)


def _sample_path(
    spec: PipelineSpec,
    probs: tuple[np.ndarray, ...],
    gen: np.random.Generator,
    _memo: dict | None = None,
) -> PipelinePath:
    indices: list[int] = []
    prev: str | None = None
    memo = _memo if _memo is not None else {}
    for step in spec.steps:
        cum = memo.get((step.index, prev))
        if cum is None:
            cum = _step_cum(spec, probs, step.index, prev)
            memo[(step.index, prev)] = cum
        pick = _draw_index(cum, gen)
        indices.append(pick)
        prev = step.algorithms[pick].id
    return make_path(spec, indices)


def _sample_paths_batch(
    spec: PipelineSpec,
    probs: tuple[np.ndarray, ...],
    gen: np.random.Generator,
    count: int,
) -> list[PipelinePath]:
    """count path draws in lockstep across steps.

    Same per-candidate law as _sample_path; every step draws all
    candidates at once against the transition-mask rows of their
    previous picks.
    """
    masks = spec._transition_masks
    picks = np.zeros((count, len(spec.steps)), dtype=np.intp)
    prev = np.zeros(count, dtype=np.intp)
    for k in range(len(spec.steps)):
        rows = masks[k][prev]
        weights = probs[k] * rows
        totals = weights.sum(axis=1)
        starved = totals <= 0.0
        if np.any(starved):
            weights[starved] = rows[starved]
            totals = weights.sum(axis=1)
        cum = np.cumsum(weights, axis=1)
        # row-wise right-bisect; a zero-weight column can never win
        draws = (cum <= (gen.random(count) * totals)[:, None]).sum(axis=1)
        draws = np.minimum(draws, cum.shape[1] - 1)
        picks[:, k] = draws
        prev = draws
    out: list[PipelinePath] = []
    path_memo: dict[tuple[int, ...], PipelinePath] = {}
    for i in range(count):
        key = tuple(int(v) for v in picks[i])
        path = path_memo.get(key)
        if path is None:
            path = make_path(spec, key)
            path_memo[key] = path
        out.append(path)
    return out


def _sample_assignment(
    spec: PipelineSpec,
    path: PipelinePath,
    part: _Partition,
    gen: np.random.Generator,
    _memo: dict | None = None,
) -> HyperparamAssignment:
    memo = _memo if _memo is not None else {}
    out: HyperparamAssignment = {}
    for aid in path.algorithm_ids:
        alg = spec.algorithm(aid)
        if not alg.hyperparams:
            continue
        values: dict[str, Any] = {}
        for h in alg.hyperparams:
            if h.kind == "categorical":
                cum = memo.get((aid, h.name))
                if cum is None:
                    cum = np.cumsum(part.categorical[(aid, h.name)])
                    memo[(aid, h.name)] = cum
                values[h.name] = h.choices[_draw_index(cum, gen)]
            else:
                values[h.name] = h.from_canonical(part.numeric[(aid, h.name)].sample(gen))
        out[aid] = values
    return out


def _sample_assignments_batch(
    spec: PipelineSpec,
    paths: Sequence[PipelinePath],
    part: _Partition,
    gen: np.random.Generator,
) -> list[HyperparamAssignment]:
    """One assignment per path, drawing each dimension's users together."""
    out: list[HyperparamAssignment] = [{} for _ in paths]
    users: dict[str, list[int]] = {}
    for i, path in enumerate(paths):
        for aid in path.algorithm_ids:
            if spec.algorithm(aid).hyperparams:
                users.setdefault(aid, []).append(i)
    for aid, members in users.items():
        alg = spec.algorithm(aid)
        slots = [out[i].setdefault(aid, {}) for i in members]
        for h in alg.hyperparams:
            if h.kind == "categorical":
                cum = np.cumsum(part.categorical[(aid, h.name)])
                draws = np.searchsorted(
                    cum, gen.random(len(members)) * cum[-1], side="right"
                )
                draws = np.minimum(draws, len(cum) - 1)
                for slot, j in zip(slots, draws.tolist()):
                    slot[h.name] = h.choices[j]
            else:
                vals = part.numeric[(aid, h.name)].sample_batch(len(members), gen)
                for slot, v in zip(slots, h.from_canonical_batch(vals)):
                    slot[h.name] = v
    return out


def _score_batch(
    spec: PipelineSpec,
    model: DensityModel,
    candidates: Sequence[tuple[PipelinePath, HyperparamAssignment]],
) -> np.ndarray:
    """Density-ratio scores for many candidates, batching the KDE work.

    Matches _score per candidate up to summation order.
    """
    scores = np.zeros(len(candidates))
    steps = np.array([c[0].step_indices for c in candidates])
    for k in range(steps.shape[1]):
        ratio = np.log(model.good.step_probs[k]) - np.log(model.bad.step_probs[k])
        scores += ratio[steps[:, k]]
    by_cat: dict[tuple[str, str], tuple[list[int], list[int]]] = {}
    by_num: dict[tuple[str, str], tuple[list[int], list[float]]] = {}
    for i, (_, assignment) in enumerate(candidates):
        for aid, values in assignment.items():
            alg = spec.algorithm(aid)
            for name, v in values.items():
                h = alg.hyperparam(name)
                if h.kind == "categorical":
                    rows, choices = by_cat.setdefault((aid, name), ([], []))
                    rows.append(i)
                    choices.append(h.choices.index(v))
                else:
                    rows, xs = by_num.setdefault((aid, name), ([], []))
                    rows.append(i)
                    xs.append(h.to_canonical(v))
    for key, (rows, choices) in by_cat.items():
        ratio = np.log(model.good.categorical[key]) - np.log(model.bad.categorical[key])
        scores[rows] += ratio[choices]
    for key, (rows, xs) in by_num.items():
        arr = np.asarray(xs)
        good = np.maximum(model.good.numeric[key].pdf_batch(arr), 1e-300)
        bad = np.maximum(model.bad.numeric[key].pdf_batch(arr), 1e-300)
        scores[rows] += np.log(good) - np.log(bad)
    return scores


def _score(
    spec: PipelineSpec,
    model: DensityModel,
    path: PipelinePath,
    assignment: HyperparamAssignment,
) -> float:
    score = 0.0
    for step in spec.steps:
        j = path.step_indices[step.index]
        score += math.log(model.good.step_probs[step.index][j])
        score -= math.log(model.bad.step_probs[step.index][j])
    for aid, values in assignment.items():
        alg = spec.algorithm(aid)
        for name, v in values.items():
            h = alg.hyperparam(name)
            if h.kind == "categorical":
                j = h.choices.index(v)
                score += math.log(model.good.categorical[(aid, name)][j])
                score -= math.log(model.bad.categorical[(aid, name)][j])
            else:
                x = h.to_canonical(v)
                score += model.good.numeric[(aid, name)].logpdf(x)
                score -= model.bad.numeric[(aid, name)].logpdf(x)
    return score


def propose(
    model: DensityModel,
    spec: PipelineSpec | None = None,
    n_candidates: int = DEFAULT_CANDIDATES,
    rng: RngLike = None,
) -> tuple[PipelinePath, HyperparamAssignment]:
    """Best of n_candidates draws from the good model, by density ratio."""
    spec = model.history.spec if spec is None else spec
    gen = as_generator(rng)
    count = max(1, n_candidates)
    paths = _sample_paths_batch(spec, model.good.step_probs, gen, count)
    assignments = _sample_assignments_batch(spec, paths, model.good, gen)
    candidates = list(zip(paths, assignments))
    scores = _score_batch(spec, model, candidates)
    return candidates[int(np.argmax(scores))]


def update(model: DensityModel, record: HistoryRecord) -> DensityModel:
    """Fold one record in; equivalent to rebuilding on the longer history.

    At most two records change sides: the new one lands in good or bad,
    and when the gamma boundary moves, the record sitting on it crosses
    over. Everything else is untouched, which keeps long fine-tuning
    runs linear instead of quadratic.
    """
    history = model.history.extended(record)
    spec = history.spec
    g_old = model.n_good
    g_new = max(1, math.ceil(model.gamma * len(history)))
    pos = bisect.bisect_right(model.ordered, record.metric, key=lambda r: r.metric)
    good, bad = model.good, model.bad
    if pos < g_new:
        good = good.with_added(spec, record)
        if g_new == g_old:
            demoted = model.ordered[g_old - 1]
            good = good.with_removed(spec, demoted)
            bad = bad.with_added(spec, demoted)
    else:
        bad = bad.with_added(spec, record)
        if g_new == g_old + 1:
            promoted = model.ordered[g_old]
            good = good.with_added(spec, promoted)
            bad = bad.with_removed(spec, promoted)
    return DensityModel(
        history=history,
        gamma=model.gamma,
        good=good,
        bad=bad,
        n_good=g_new,
        ordered=model.ordered[:pos] + (record,) + model.ordered[pos:],
    )
