"""Pipeline search spaces.

A pipeline is a fixed sequence of steps; each step offers a set of
algorithms, and each algorithm carries its own hyperparameters. A
concrete pipeline picks exactly one algorithm per step, subject to an
edge set restricting which algorithms in adjacent steps may follow one
another. Omitting the edge set means any algorithm may follow any
other, and the number of concrete pipelines is then the product of
the step sizes.

Paths are encoded as one-hot bit blocks, one block per step, which is
the representation every model in this package consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

import json

import numpy as np

from .canonical import canonical_json, digest128
from .errors import (
    ConfigParseError,
    DimensionMismatch,
    EdgeViolation,
    EmptyPathSet,
    PathCountExceedsLimit,
    UnknownAlgorithm,
)

DEFAULT_ENUMERATION_LIMIT = 100_000

HyperparamValue = Union[float, int, str, bool]
# algorithm id -> {hyperparam name -> value}; algorithms without
# hyperparameters do not appear.
HyperparamAssignment = dict[str, dict[str, HyperparamValue]]

RngLike = Union[int, None, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    """Accept a seed or an existing generator and return a generator."""
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# space definition


@dataclass(frozen=True)
class HyperparamSpec:
    """One tunable dimension of an algorithm.

    kind "continuous" and "integer" use `bounds` (inclusive, lo < hi);
    kind "categorical" uses `choices`. Log scale draws and models the
    value on a log10 axis, so bounds must be positive.
    """

    name: str
    kind: str
    bounds: tuple[float, float] | None = None
    choices: tuple[HyperparamValue, ...] | None = None
    scale: str = "linear"
    default: HyperparamValue | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "integer", "categorical"):
            raise ConfigParseError(f"hyperparam {self.name!r}: unknown kind {self.kind!r}")
        if self.scale not in ("linear", "log"):
            raise ConfigParseError(f"hyperparam {self.name!r}: unknown scale {self.scale!r}")
        if self.kind == "categorical":
            if not self.choices:
                raise ConfigParseError(f"hyperparam {self.name!r}: categorical needs choices")
            if self.scale != "linear":
                raise ConfigParseError(f"hyperparam {self.name!r}: categorical cannot be log scaled")
            if len(set(self.choices)) != len(self.choices):
                raise ConfigParseError(f"hyperparam {self.name!r}: duplicate choices")
            object.__setattr__(self, "choices", tuple(self.choices))
        else:
            if self.bounds is None:
                raise ConfigParseError(f"hyperparam {self.name!r}: {self.kind} needs bounds")
            lo, hi = float(self.bounds[0]), float(self.bounds[1])
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise ConfigParseError(f"hyperparam {self.name!r}: bounds must be finite with lo < hi")
            if self.scale == "log" and lo <= 0:
                raise ConfigParseError(f"hyperparam {self.name!r}: log scale needs positive bounds")
            if self.kind == "integer" and (lo != int(lo) or hi != int(hi)):
                raise ConfigParseError(f"hyperparam {self.name!r}: integer bounds must be whole")
            object.__setattr__(self, "bounds", (lo, hi))
        if self.default is not None and not self.contains(self.default):
            raise ConfigParseError(f"hyperparam {self.name!r}: default outside domain")

    def contains(self, value: HyperparamValue) -> bool:
        if self.kind == "categorical":
            return value in self.choices
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        lo, hi = self.bounds
        if self.kind == "integer" and float(value) != int(value):
            return False
        return lo <= float(value) <= hi

    # The canonical axis is where densities and distances live: log10
    # for log-scaled dimensions, identity otherwise.
    def canonical_bounds(self) -> tuple[float, float]:
        lo, hi = self.bounds
        if self.scale == "log":
            return (math.log10(lo), math.log10(hi))
        return (lo, hi)

    def to_canonical(self, value: HyperparamValue) -> float:
        v = float(value)
        return math.log10(v) if self.scale == "log" else v

    def from_canonical(self, x: float) -> HyperparamValue:
        v = 10.0**x if self.scale == "log" else x
        lo, hi = self.bounds
        v = min(max(v, lo), hi)
        if self.kind == "integer":
            return int(min(max(round(v), int(lo)), int(hi)))
        return float(v)

    def from_canonical_batch(self, xs: np.ndarray) -> list[HyperparamValue]:
        """from_canonical over an array, one value per entry.

        Maps the scalar formula (numpy's vectorized pow rounds a few
        values differently from libm, and these must agree bitwise).
        """
        lo, hi = self.bounds
        if self.scale == "log":
            vs = [min(max(10.0**x, lo), hi) for x in np.asarray(xs, dtype=float).tolist()]
        else:
            vs = [min(max(x, lo), hi) for x in np.asarray(xs, dtype=float).tolist()]
        if self.kind == "integer":
            ilo, ihi = int(lo), int(hi)
            return [int(min(max(round(v), ilo), ihi)) for v in vs]
        return vs

    def default_value(self) -> HyperparamValue:
        if self.default is not None:
            return self.default
        if self.kind == "categorical":
            return self.choices[0]
        lo, hi = self.canonical_bounds()
        return self.from_canonical((lo + hi) / 2.0)


@dataclass(frozen=True)
class AlgorithmSpec:
    """An algorithm choice within a step."""

    id: str
    hyperparams: tuple[HyperparamSpec, ...] = ()

    def __post_init__(self):
        if not self.id:
            raise ConfigParseError("algorithm id must be non-empty")
        object.__setattr__(self, "hyperparams", tuple(self.hyperparams))
        names = [h.name for h in self.hyperparams]
        if len(set(names)) != len(names):
            raise ConfigParseError(f"algorithm {self.id!r}: duplicate hyperparam names")

    @cached_property
    def _by_name(self) -> dict[str, HyperparamSpec]:
        return {h.name: h for h in self.hyperparams}

    def hyperparam(self, name: str) -> HyperparamSpec:
        return self._by_name[name]


@dataclass(frozen=True)
class Step:
    """One position in the pipeline with its candidate algorithms."""

    index: int
    algorithms: tuple[AlgorithmSpec, ...]

    def __post_init__(self):
        if not self.algorithms:
            raise ConfigParseError(f"step {self.index} has no algorithms")
        object.__setattr__(self, "algorithms", tuple(self.algorithms))


@dataclass(frozen=True)
class PipelinePath:
    """A concrete pipeline: one algorithm per step.

    Ordering is lexicographic over the per-step algorithm indices,
    which is also the enumeration order; it serves as the global
    tie-break whenever two paths score identically.
    """

    step_indices: tuple[int, ...]
    algorithm_ids: tuple[str, ...]
    onehot: tuple[int, ...]

    def __lt__(self, other: "PipelinePath") -> bool:
        return self.step_indices < other.step_indices

    def as_array(self) -> np.ndarray:
        return np.asarray(self.onehot, dtype=float)

    def key(self) -> str:
        """Dash-joined algorithm ids, the trace-file form of a path."""
        return "-".join(self.algorithm_ids)


@dataclass(frozen=True)
class PipelineSpec:
    """The whole search space: steps, algorithms, and allowed transitions.

    Algorithm ids must be unique across the entire spec so that edges
    and hyperparameter assignments can refer to them unambiguously.
    Every algorithm must lie on at least one input-to-output path.
    """

    name: str
    steps: tuple[Step, ...]
    edges: frozenset[tuple[str, str]]

    def __post_init__(self):
        if not self.steps:
            raise ConfigParseError("spec needs at least one step")
        object.__setattr__(self, "steps", tuple(self.steps))
        for pos, step in enumerate(self.steps):
            if step.index != pos:
                raise ConfigParseError(f"step indices must run 0..{len(self.steps) - 1}")
        seen: dict[str, int] = {}
        for step in self.steps:
            for alg in step.algorithms:
                if alg.id in seen:
                    raise ConfigParseError(f"algorithm id {alg.id!r} appears in more than one place")
                seen[alg.id] = step.index
        object.__setattr__(self, "edges", frozenset(self.edges))
        for a, b in self.edges:
            if a not in seen or b not in seen:
                raise ConfigParseError(f"edge ({a!r}, {b!r}) names an unknown algorithm")
            if seen[b] != seen[a] + 1:
                raise ConfigParseError(f"edge ({a!r}, {b!r}) must connect adjacent steps")
        # Every algorithm must be usable: reachable from the input side
        # and able to reach the output side.
        suffix = self._suffix_counts
        for step in self.steps:
            for alg in step.algorithms:
                if suffix[alg.id] == 0 or not self._forward_reachable(alg.id):
                    raise ConfigParseError(f"algorithm {alg.id!r} lies on no complete path")

    # -- derived lookups ----------------------------------------------------

    @cached_property
    def num_steps(self) -> int:
        return len(self.steps)

    @cached_property
    def num_algorithms(self) -> int:
        return sum(len(s.algorithms) for s in self.steps)

    @cached_property
    def block_offsets(self) -> tuple[int, ...]:
        offs, total = [], 0
        for s in self.steps:
            offs.append(total)
            total += len(s.algorithms)
        return tuple(offs)

    @cached_property
    def _locate(self) -> dict[str, tuple[int, int]]:
        """algorithm id -> (step index, index within step)"""
        out = {}
        for step in self.steps:
            for j, alg in enumerate(step.algorithms):
                out[alg.id] = (step.index, j)
        return out

    @cached_property
    def _successors(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, tuple[str, ...]] = {}
        for step in self.steps[:-1]:
            nxt = self.steps[step.index + 1].algorithms
            for alg in step.algorithms:
                out[alg.id] = tuple(b.id for b in nxt if (alg.id, b.id) in self.edges)
        for alg in self.steps[-1].algorithms:
            out[alg.id] = ()
        return out

    @cached_property
    def _suffix_counts(self) -> dict[str, int]:
        """Number of ways to finish the pipeline starting from each algorithm."""
        counts: dict[str, int] = {a.id: 1 for a in self.steps[-1].algorithms}
        for step in reversed(self.steps[:-1]):
            for alg in step.algorithms:
                counts[alg.id] = sum(counts[b] for b in self._successors[alg.id])
        return counts

    @cached_property
    def _transition_masks(self) -> tuple[np.ndarray, ...]:
        """Per step, a boolean matrix of viable picks given the previous pick.

        Step 0 has a single row; step k > 0 has one row per algorithm
        of step k-1, true where the edge exists and the pick can still
        reach the output.
        """
        masks: list[np.ndarray] = []
        for step in self.steps:
            algs = step.algorithms
            alive = np.array([self._suffix_counts[a.id] > 0 for a in algs])
            if step.index == 0:
                masks.append(alive[None, :])
                continue
            prev_algs = self.steps[step.index - 1].algorithms
            m = np.zeros((len(prev_algs), len(algs)), dtype=bool)
            for i, pa in enumerate(prev_algs):
                for j, a in enumerate(algs):
                    m[i, j] = (pa.id, a.id) in self.edges
            masks.append(m & alive[None, :])
        return tuple(masks)

    def _forward_reachable(self, algorithm_id: str) -> bool:
        step_idx, _ = self._locate[algorithm_id]
        reachable = {a.id for a in self.steps[0].algorithms}
        for k in range(step_idx):
            reachable = {
                b for a in reachable for b in self._successors[a]
            }
        return algorithm_id in reachable or step_idx == 0

    def locate(self, algorithm_id: str) -> tuple[int, int]:
        try:
            return self._locate[algorithm_id]
        except KeyError:
            raise UnknownAlgorithm(f"no algorithm named {algorithm_id!r}") from None

    @cached_property
    def _algorithms_by_id(self) -> dict[str, AlgorithmSpec]:
        return {a.id: a for s in self.steps for a in s.algorithms}

    def algorithm(self, algorithm_id: str) -> AlgorithmSpec:
        try:
            return self._algorithms_by_id[algorithm_id]
        except KeyError:
            raise UnknownAlgorithm(f"no algorithm named {algorithm_id!r}") from None

    # -- constructors -------------------------------------------------------

    @classmethod
    def fully_connected(cls, name: str, steps: Sequence[Step]) -> "PipelineSpec":
        edges = set()
        steps = tuple(steps)
        for a, b in zip(steps[:-1], steps[1:]):
            for x in a.algorithms:
                for y in b.algorithms:
                    edges.add((x.id, y.id))
        return cls(name=name, steps=steps, edges=frozenset(edges))


# ---------------------------------------------------------------------------
# path operations


def count_paths(spec: PipelineSpec) -> int:
    return sum(spec._suffix_counts[a.id] for a in spec.steps[0].algorithms)


def make_path(spec: PipelineSpec, step_indices: Sequence[int]) -> PipelinePath:
    """Build a path from per-step algorithm indices, validating edges."""
    if len(step_indices) != spec.num_steps:
        raise DimensionMismatch(
            f"path has {len(step_indices)} steps, spec has {spec.num_steps}"
        )
    ids = []
    for k, j in enumerate(step_indices):
        algs = spec.steps[k].algorithms
        if not 0 <= j < len(algs):
            raise UnknownAlgorithm(f"step {k} has no algorithm at index {j}")
        ids.append(algs[j].id)
    for a, b in zip(ids[:-1], ids[1:]):
        if (a, b) not in spec.edges:
            raise EdgeViolation(f"no edge from {a!r} to {b!r}")
    onehot = [0] * spec.num_algorithms
    for k, j in enumerate(step_indices):
        onehot[spec.block_offsets[k] + j] = 1
    return PipelinePath(
        step_indices=tuple(int(j) for j in step_indices),
        algorithm_ids=tuple(ids),
        onehot=tuple(onehot),
    )


def encode_path(spec: PipelineSpec, algorithm_ids: Sequence[str]) -> PipelinePath:
    """One-hot encode a sequence of algorithm ids, one per step."""
    if len(algorithm_ids) != spec.num_steps:
        raise DimensionMismatch(
            f"got {len(algorithm_ids)} algorithm ids for {spec.num_steps} steps"
        )
    indices = []
    for k, aid in enumerate(algorithm_ids):
        step_k, j = spec.locate(aid)
        if step_k != k:
            raise UnknownAlgorithm(f"algorithm {aid!r} belongs to step {step_k}, not {k}")
        indices.append(j)
    return make_path(spec, indices)


def decode_path(spec: PipelineSpec, onehot: Sequence[int]) -> PipelinePath:
    """Invert `encode_path`, rejecting malformed encodings."""
    vec = list(onehot)
    if len(vec) != spec.num_algorithms:
        raise DimensionMismatch(
            f"encoding has {len(vec)} bits, spec has {spec.num_algorithms} algorithms"
        )
    indices = []
    for step in spec.steps:
        off = spec.block_offsets[step.index]
        block = vec[off : off + len(step.algorithms)]
        if any(b not in (0, 1) for b in block) or sum(block) != 1:
            raise DimensionMismatch(f"step {step.index} block is not one-hot: {block}")
        indices.append(block.index(1))
    return make_path(spec, indices)


def is_valid_path(spec: PipelineSpec, algorithm_ids: Sequence[str]) -> bool:
    try:
        encode_path(spec, algorithm_ids)
        return True
    except (UnknownAlgorithm, EdgeViolation, DimensionMismatch):
        return False


def enumerate_paths(
    spec: PipelineSpec, limit: int = DEFAULT_ENUMERATION_LIMIT
) -> list[PipelinePath]:
    """All valid paths in lexicographic order of per-step indices.

    Counts first via dynamic programming, so an oversized space fails
    fast instead of materializing anything.
    """
    total = count_paths(spec)
    if total > limit:
        raise PathCountExceedsLimit(total, limit)
    out: list[PipelinePath] = []
    indices: list[int] = []

    def walk(k: int):
        for j, alg in enumerate(spec.steps[k].algorithms):
            if k > 0:
                prev = spec.steps[k - 1].algorithms[indices[-1]].id
                if (prev, alg.id) not in spec.edges:
                    continue
            if spec._suffix_counts[alg.id] == 0:
                continue
            indices.append(j)
            if k == spec.num_steps - 1:
                out.append(make_path(spec, indices))
            else:
                walk(k + 1)
            indices.pop()

    walk(0)
    return out


def sample_random_path(spec: PipelineSpec, rng: RngLike = None) -> PipelinePath:
    """Draw a valid path, uniform per step over viable choices.

    For fully connected specs this is uniform over all paths.
    """
    gen = as_generator(rng)
    indices: list[int] = []
    prev_id: str | None = None
    for step in spec.steps:
        viable = []
        for j, alg in enumerate(step.algorithms):
            if prev_id is not None and (prev_id, alg.id) not in spec.edges:
                continue
            if spec._suffix_counts[alg.id] == 0:
                continue
            viable.append(j)
        pick = viable[int(gen.integers(len(viable)))]
        indices.append(pick)
        prev_id = step.algorithms[pick].id
    return make_path(spec, indices)


def sample_random_hyperparams(
    spec: PipelineSpec, path: PipelinePath, rng: RngLike = None
) -> HyperparamAssignment:
    """Independent uniform draw for every hyperparameter on the path.

    Continuous and integer dimensions draw uniformly on their canonical
    axis (log10 for log scale); integers round to the nearest value in
    range; categoricals draw a choice uniformly.
    """
    gen = as_generator(rng)
    out: HyperparamAssignment = {}
    for aid in path.algorithm_ids:
        alg = spec.algorithm(aid)
        if not alg.hyperparams:
            continue
        values: dict[str, HyperparamValue] = {}
        for h in alg.hyperparams:
            if h.kind == "categorical":
                values[h.name] = h.choices[int(gen.integers(len(h.choices)))]
            elif h.kind == "integer":
                # rounding a continuous uniform would halve the boundary
                # values' mass; draw on the integer range directly
                lo, hi = h.bounds
                values[h.name] = int(gen.integers(int(lo), int(hi) + 1))
            else:
                lo, hi = h.canonical_bounds()
                values[h.name] = h.from_canonical(float(gen.uniform(lo, hi)))
        out[aid] = values
    return out


def validate_assignment(
    spec: PipelineSpec, path: PipelinePath, assignment: HyperparamAssignment
) -> None:
    """Check that an assignment covers the path exactly, values in domain."""
    expected = {
        aid for aid in path.algorithm_ids if spec.algorithm(aid).hyperparams
    }
    if set(assignment) != expected:
        raise DimensionMismatch(
            f"assignment keys {sorted(assignment)} do not match path algorithms {sorted(expected)}"
        )
    for aid, values in assignment.items():
        alg = spec.algorithm(aid)
        names = {h.name for h in alg.hyperparams}
        if set(values) != names:
            raise DimensionMismatch(
                f"algorithm {aid!r}: expected hyperparams {sorted(names)}, got {sorted(values)}"
            )
        for name, v in values.items():
            if not alg.hyperparam(name).contains(v):
                raise DimensionMismatch(f"algorithm {aid!r}: value {v!r} outside domain of {name!r}")


def default_hyperparams(spec: PipelineSpec, path: PipelinePath) -> HyperparamAssignment:
    out: HyperparamAssignment = {}
    for aid in path.algorithm_ids:
        alg = spec.algorithm(aid)
        if alg.hyperparams:
            out[aid] = {h.name: h.default_value() for h in alg.hyperparams}
    return out


def prune_to_subgraph(spec: PipelineSpec, paths: Sequence[PipelinePath]) -> PipelineSpec:
    """Restrict the spec to exactly the algorithms and edges the given paths use."""
    if not paths:
        raise EmptyPathSet("cannot prune to an empty path set")
    keep_ids: set[str] = set()
    keep_edges: set[tuple[str, str]] = set()
    for p in paths:
        if len(p.algorithm_ids) != spec.num_steps:
            raise DimensionMismatch("path step count does not match spec")
        for aid in p.algorithm_ids:
            spec.locate(aid)
            keep_ids.add(aid)
        for a, b in zip(p.algorithm_ids[:-1], p.algorithm_ids[1:]):
            if (a, b) not in spec.edges:
                raise EdgeViolation(f"path uses missing edge ({a!r}, {b!r})")
            keep_edges.add((a, b))
    steps = tuple(
        Step(
            index=s.index,
            algorithms=tuple(a for a in s.algorithms if a.id in keep_ids),
        )
        for s in spec.steps
    )
    return PipelineSpec(name=spec.name, steps=steps, edges=frozenset(keep_edges))


# ---------------------------------------------------------------------------
# file format


def to_json_dict(spec: PipelineSpec) -> dict[str, Any]:
    return {
        "name": spec.name,
        "steps": [
            {
                "index": s.index,
                "algorithms": [
                    {
                        "id": a.id,
                        "hyperparams": [
                            {
                                "name": h.name,
                                "kind": h.kind,
                                **(
                                    {"bounds": [h.bounds[0], h.bounds[1]]}
                                    if h.bounds is not None
                                    else {"choices": list(h.choices)}
                                ),
                                "scale": h.scale,
                                **({"default": h.default} if h.default is not None else {}),
                            }
                            for h in a.hyperparams
                        ],
                    }
                    for a in s.algorithms
                ],
            }
            for s in spec.steps
        ],
        "edges": sorted([a, b] for a, b in spec.edges),
    }


def from_json_dict(data: dict[str, Any]) -> PipelineSpec:
    try:
        name = data["name"]
        raw_steps = sorted(data["steps"], key=lambda s: s["index"])
        steps = []
        for pos, rs in enumerate(raw_steps):
            algs = []
            for ra in rs["algorithms"]:
                hps = []
                for rh in ra.get("hyperparams", []):
                    hps.append(
                        HyperparamSpec(
                            name=rh["name"],
                            kind=rh["kind"],
                            bounds=tuple(rh["bounds"]) if "bounds" in rh else None,
                            choices=tuple(rh["choices"]) if "choices" in rh else None,
                            scale=rh.get("scale", "linear"),
                            default=rh.get("default"),
                        )
                    )
                algs.append(AlgorithmSpec(id=ra["id"], hyperparams=tuple(hps)))
            steps.append(Step(index=pos, algorithms=tuple(algs)))
        if "edges" in data and data["edges"] is not None:
            edges = frozenset((a, b) for a, b in data["edges"])
            return PipelineSpec(name=name, steps=tuple(steps), edges=edges)
        return PipelineSpec.fully_connected(name, steps)
    except ConfigParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigParseError(f"malformed pipeline spec: {exc}") from exc


def load_spec(path: str | Path) -> PipelineSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigParseError(f"cannot read spec file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"spec file is not valid JSON: {exc}") from exc
    return from_json_dict(data)


def save_spec(spec: PipelineSpec, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(to_json_dict(spec), fh, indent=2)
        fh.write("\n")


def spec_digest(spec: PipelineSpec) -> str:
    """Stable 128-bit identifier for a search space."""
    return digest128(canonical_json(to_json_dict(spec)))
