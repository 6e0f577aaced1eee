"""Linear surrogate over one-hot path encodings, and its acquisitions.

The metric model is ridge regression solved in normal-equation form:

    (P'P + lambda * I) beta = P' t

with predictive mean beta'p and predictive variance

    noise_var * (1 + p' (P'P + lambda * I)^{-1} p).

The noise variance is the population variance of the fit residuals,
floored so the predictive variance never collapses to zero. A second
model of the same family, fit on log(1 + cost), turns expected
improvement into an improvement-per-unit-log-cost acquisition that
favors paths that look good *and* cheap.

Metrics are losses throughout: lower is better.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg as sla
from scipy.stats import norm

from .errors import DimensionMismatch, EmptyPathSet
from .graph import (
    PipelinePath,
    PipelineSpec,
    RngLike,
    as_generator,
    count_paths,
    enumerate_paths,
    sample_random_path,
)

NOISE_VAR_FLOOR = 1e-6
LOG_COST_FLOOR = 1e-3
DEFAULT_RIDGE_LAMBDA = 1.0


@dataclass(frozen=True)
class ObservationSet:
    """Evaluated configurations: encodings, metrics, and run costs."""

    design: np.ndarray  # (n, N) one-hot rows
    metrics: np.ndarray  # (n,)
    costs: np.ndarray  # (n,) seconds, strictly positive

    def __post_init__(self):
        design = np.atleast_2d(np.asarray(self.design, dtype=float))
        metrics = np.asarray(self.metrics, dtype=float).ravel()
        costs = np.asarray(self.costs, dtype=float).ravel()
        if design.shape[0] != metrics.shape[0] or metrics.shape[0] != costs.shape[0]:
            raise DimensionMismatch(
                f"design has {design.shape[0]} rows, {metrics.shape[0]} metrics, {costs.shape[0]} costs"
            )
        if design.shape[0] == 0:
            raise DimensionMismatch("observation set needs at least one row")
        if not np.all(costs > 0):
            raise DimensionMismatch("costs must be strictly positive")
        object.__setattr__(self, "design", design)
        object.__setattr__(self, "metrics", metrics)
        object.__setattr__(self, "costs", costs)

    @classmethod
    def from_paths(
        cls,
        paths: Sequence[PipelinePath],
        metrics: Sequence[float],
        costs: Sequence[float],
    ) -> "ObservationSet":
        if not paths:
            raise DimensionMismatch("observation set needs at least one row")
        design = np.stack([p.as_array() for p in paths])
        return cls(design=design, metrics=np.asarray(metrics), costs=np.asarray(costs))

    def __len__(self) -> int:
        return self.design.shape[0]


@dataclass(frozen=True)
class LinearSurrogate:
    """Fitted ridge model; immutable once built."""

    beta: np.ndarray
    ridge_lambda: float
    gram_inverse: np.ndarray
    noise_var: float


@dataclass(frozen=True)
class Prediction:
    mean: float
    variance: float

    @property
    def std(self) -> float:
        return float(np.sqrt(self.variance))


def fit_ridge(
    observations: ObservationSet,
    targets: np.ndarray | None = None,
    ridge_lambda: float = DEFAULT_RIDGE_LAMBDA,
) -> LinearSurrogate:
    """Fit the regularized linear model on the given targets.

    Targets default to the observation metrics; the cost model passes
    its own transformed vector.
    """
    if ridge_lambda <= 0:
        raise ValueError("ridge_lambda must be positive")
    P = observations.design
    t = observations.metrics if targets is None else np.asarray(targets, dtype=float).ravel()
    if t.shape[0] != P.shape[0]:
        raise DimensionMismatch(f"{t.shape[0]} targets for {P.shape[0]} rows")
    n_dim = P.shape[1]
    gram = P.T @ P + ridge_lambda * np.eye(n_dim)
    cho = sla.cho_factor(gram, lower=True)
    beta = sla.cho_solve(cho, P.T @ t)
    gram_inverse = sla.cho_solve(cho, np.eye(n_dim))
    gram_inverse = (gram_inverse + gram_inverse.T) / 2.0
    residuals = t - P @ beta
    noise_var = max(NOISE_VAR_FLOOR, float(np.var(residuals)))
    return LinearSurrogate(
        beta=beta,
        ridge_lambda=float(ridge_lambda),
        gram_inverse=gram_inverse,
        noise_var=noise_var,
    )


def predict(model: LinearSurrogate, path: PipelinePath) -> Prediction:
    p = path.as_array()
    if p.shape[0] != model.beta.shape[0]:
        raise DimensionMismatch(
            f"path encodes {p.shape[0]} bits, model has {model.beta.shape[0]}"
        )
    mean = float(model.beta @ p)
    quad = float(p @ model.gram_inverse @ p)
    variance = model.noise_var * (1.0 + max(quad, 0.0))
    return Prediction(mean=mean, variance=variance)


def predict_batch(model: LinearSurrogate, design: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized predictions for many encodings at once."""
    P = np.atleast_2d(np.asarray(design, dtype=float))
    if P.shape[1] != model.beta.shape[0]:
        raise DimensionMismatch(
            f"designs encode {P.shape[1]} bits, model has {model.beta.shape[0]}"
        )
    means = P @ model.beta
    quad = np.einsum("ij,ij->i", P @ model.gram_inverse, P)
    variances = model.noise_var * (1.0 + np.maximum(quad, 0.0))
    return means, variances


def expected_improvement(
    mean: float, std: float, best_metric: float, xi: float = 0.0
) -> float:
    """Expected amount by which a draw N(mean, std^2) lands below best - xi."""
    gap = best_metric - xi - mean
    if std <= 0.0:
        return max(gap, 0.0)
    u = gap / std
    value = std * (u * norm.cdf(u) + norm.pdf(u))
    return max(float(value), 0.0)


def log_expected_improvement(
    means: np.ndarray, stds: np.ndarray, best_metric: float, xi: float = 0.0
) -> np.ndarray:
    """log EI, stable deep into the tail where EI itself underflows.

    With g(u) = u * cdf(u) + pdf(u), log EI = log std + log g(u). For
    very negative u, g is evaluated as pdf(u) * (1 + u * cdf(u)/pdf(u))
    through logcdf, which survives where the direct product flushes to
    zero. Ordering matches `expected_improvement` wherever the latter
    is representable; exact zeros map to -inf.
    """
    means = np.atleast_1d(np.asarray(means, dtype=float))
    stds = np.atleast_1d(np.asarray(stds, dtype=float))
    u = np.where(stds > 0, (best_metric - xi - means) / np.where(stds > 0, stds, 1.0), 0.0)
    out = np.full(u.shape, -np.inf)

    deterministic = stds <= 0.0
    gap = best_metric - xi - means
    pos_det = deterministic & (gap > 0)
    out[pos_det] = np.log(gap[pos_det])

    live = ~deterministic
    direct = live & (u > -25.0)
    if np.any(direct):
        g = u[direct] * norm.cdf(u[direct]) + norm.pdf(u[direct])
        with np.errstate(divide="ignore"):
            out[direct] = np.log(stds[direct]) + np.log(np.maximum(g, 0.0))
    tail = live & (u <= -25.0)
    if np.any(tail):
        ut = u[tail]
        ratio = ut * np.exp(norm.logcdf(ut) - norm.logpdf(ut))  # in (-1, 0)
        out[tail] = np.log(stds[tail]) + norm.logpdf(ut) + np.log1p(ratio)
    return out


def fit_cost_model(
    observations: ObservationSet, ridge_lambda: float = DEFAULT_RIDGE_LAMBDA
) -> LinearSurrogate:
    """Model run cost on a log(1 + seconds) axis, where it is near-additive."""
    return fit_ridge(observations, targets=np.log1p(observations.costs), ridge_lambda=ridge_lambda)


def eips(
    metric_model: LinearSurrogate,
    cost_model: LinearSurrogate,
    path: PipelinePath,
    best_metric: float,
    xi: float = 0.0,
) -> float:
    """Expected improvement per predicted unit of log cost."""
    pred = predict(metric_model, path)
    ei = expected_improvement(pred.mean, pred.std, best_metric, xi)
    cost = max(LOG_COST_FLOOR, predict(cost_model, path).mean)
    return ei / cost


def log_eips_batch(
    metric_model: LinearSurrogate,
    cost_model: LinearSurrogate,
    design: np.ndarray,
    best_metric: float,
    xi: float = 0.0,
) -> np.ndarray:
    """log of the EIPS acquisition for each encoding row; -inf where EI = 0."""
    means, variances = predict_batch(metric_model, design)
    log_ei = log_expected_improvement(means, np.sqrt(variances), best_metric, xi)
    cost_means, _ = predict_batch(cost_model, design)
    return log_ei - np.log(np.maximum(LOG_COST_FLOOR, cost_means))


@dataclass(frozen=True)
class CandidateSet:
    """A fixed pool of paths with their stacked encodings.

    Building one up front lets a selection loop over an enumerable space
    skip re-enumerating and re-encoding on every call.
    """

    paths: tuple[PipelinePath, ...]
    design: np.ndarray

    @classmethod
    def from_paths(cls, paths: Sequence[PipelinePath]) -> "CandidateSet":
        if not paths:
            raise EmptyPathSet("candidate set cannot be empty")
        return cls(paths=tuple(paths), design=np.stack([p.as_array() for p in paths]))


def _candidate_paths(
    spec: PipelineSpec, candidate_budget: int, rng: RngLike
) -> list[PipelinePath]:
    """All paths when the space is small, else distinct random samples."""
    if count_paths(spec) <= candidate_budget:
        return enumerate_paths(spec, limit=candidate_budget)
    gen = as_generator(rng)
    seen: set[tuple[int, ...]] = set()
    picks: list[PipelinePath] = []
    attempts = 0
    while len(picks) < candidate_budget and attempts < 50 * candidate_budget:
        p = sample_random_path(spec, gen)
        attempts += 1
        if p.step_indices not in seen:
            seen.add(p.step_indices)
            picks.append(p)
    return picks


def select_next_path(
    spec: PipelineSpec,
    metric_model: LinearSurrogate,
    cost_model: LinearSurrogate,
    best_metric: float,
    xi: float = 0.0,
    candidate_budget: int = 2048,
    rng: RngLike = None,
    candidates: CandidateSet | None = None,
) -> PipelinePath:
    """Argmax of EIPS over the candidate set, ties to the smaller encoding.

    The acquisition is compared in log space so that tiny but distinct
    values still rank correctly when a large margin pushes EI into the
    far tail of the normal distribution. A prebuilt CandidateSet skips
    the per-call enumeration.
    """
    if candidates is None:
        pool = _candidate_paths(spec, candidate_budget, rng)
        if not pool:
            raise EmptyPathSet("no candidate paths to select from")
        candidates = CandidateSet.from_paths(pool)
    scores = log_eips_batch(metric_model, cost_model, candidates.design, best_metric, xi)
    paths = candidates.paths
    best = min(range(len(paths)), key=lambda i: (-scores[i], paths[i].step_indices))
    return paths[best]


def rank_paths_by_eips(
    spec: PipelineSpec,
    metric_model: LinearSurrogate,
    cost_model: LinearSurrogate,
    best_metric: float,
    top_r: int,
    xi: float = 0.0,
    candidate_budget: int = 2048,
    rng: RngLike = None,
    candidates: CandidateSet | None = None,
) -> list[PipelinePath]:
    """Top r distinct paths by EIPS, deterministic under ties."""
    if candidates is None:
        pool = _candidate_paths(spec, candidate_budget, rng)
        if not pool:
            raise EmptyPathSet("no candidate paths to rank")
        candidates = CandidateSet.from_paths(pool)
    scores = log_eips_batch(metric_model, cost_model, candidates.design, best_metric, xi)
    paths = candidates.paths
    order = sorted(range(len(paths)), key=lambda i: (-scores[i], paths[i].step_indices))
    return [paths[i] for i in order[: max(1, top_r)]]
