"""Greedy batch selection that spreads initial runs over the space.

The quality of a set of one-hot path encodings is the product of the
top min(l, N) eigenvalues of the Gram matrix H = sum_i p_i p_i', where
l is the number of paths chosen so far. Working with the log of that
product keeps the greedy argmax stable; a small epsilon inside each
log term keeps rank-deficient Grams finite.

A useful structural fact: every path sets exactly one bit per step, so
trace(H) = l * K no matter which paths are chosen. That makes trace
useless as a design criterion here, and also lets the online variant
recover l from the Gram it is handed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EmptyPathSet, NonSymmetricInput
from .graph import (
    PipelinePath,
    PipelineSpec,
    RngLike,
    as_generator,
    count_paths,
    enumerate_paths,
    sample_random_path,
)

EIG_EPSILON = 1e-12
SYMMETRY_TOLERANCE = 1e-9
# Scores within this margin of the best count as tied and fall through to
# the lexicographic rule. Mathematically equal criteria come out of the
# eigensolver with ~1e-12 of noise that would otherwise break ties by
# accident of rounding.
TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class DesignState:
    """Selected paths plus their running Gram matrix."""

    selected: tuple[PipelinePath, ...]
    gram: np.ndarray

    @classmethod
    def empty(cls, n_dims: int) -> "DesignState":
        return cls(selected=(), gram=np.zeros((n_dims, n_dims)))

    def add(self, path: PipelinePath) -> "DesignState":
        p = path.as_array()
        return DesignState(selected=self.selected + (path,), gram=self.gram + np.outer(p, p))


def d_criterion(gram: np.ndarray, num_selected: int) -> float:
    """Sum of log eigenvalues over the top min(num_selected, N) of them."""
    H = np.asarray(gram, dtype=float)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise NonSymmetricInput(f"gram must be square, got shape {H.shape}")
    if not np.allclose(H, H.T, atol=SYMMETRY_TOLERANCE):
        raise NonSymmetricInput("gram matrix is not symmetric")
    if num_selected < 1:
        raise ValueError("num_selected must be at least 1")
    eigs = np.linalg.eigvalsh(H)[::-1]  # descending
    top = eigs[: min(num_selected, H.shape[0])]
    # eigvalsh can return tiny negative values for PSD input; clip them
    # before the epsilon so the log stays defined.
    return float(np.sum(np.log(np.maximum(top, 0.0) + EIG_EPSILON)))


def generate_candidates(
    spec: PipelineSpec, budget: int, rng: RngLike = None
) -> list[PipelinePath]:
    """Candidate pool: every path if the space fits, else distinct samples."""
    if budget < 1:
        raise ValueError("candidate budget must be at least 1")
    if count_paths(spec) <= budget:
        return enumerate_paths(spec, limit=budget)
    gen = as_generator(rng)
    seen: set[tuple[int, ...]] = set()
    out: list[PipelinePath] = []
    attempts = 0
    while len(out) < budget and attempts < 50 * budget:
        p = sample_random_path(spec, gen)
        attempts += 1
        if p.step_indices not in seen:
            seen.add(p.step_indices)
            out.append(p)
    return out


def greedy_online_next(candidates: list[PipelinePath], gram: np.ndarray) -> PipelinePath:
    """Single greedy step: the candidate whose addition maximizes the criterion.

    The current selection size is recovered from trace(gram) / K, which
    is exact for Grams built from one-hot path encodings. Scores within
    TIE_TOLERANCE of the best are ties and go to the lexicographically
    smallest path.
    """
    if not candidates:
        raise EmptyPathSet("no candidates to pick from")
    H = np.asarray(gram, dtype=float)
    k = len(candidates[0].step_indices)
    ell = int(round(float(np.trace(H)) / k)) + 1
    scores = [
        d_criterion(H + np.outer(c.as_array(), c.as_array()), ell) for c in candidates
    ]
    top = max(scores)
    return min(
        (c for c, s in zip(candidates, scores) if s >= top - TIE_TOLERANCE),
        key=lambda c: c.step_indices,
    )


class OnlineDesigner:
    """Greedy selection over a fixed pool, scoring all candidates per round.

    Produces the same argmax as calling greedy_online_next with a running
    Gram, but in one vectorized pass: the criterion for gram + p p' only
    needs the compact Gram of the chosen encodings stacked with p, whose
    nonzero spectrum matches the full one. While fewer paths are chosen
    than there are encoding dimensions, one batched eigendecomposition of
    (m+1) x (m+1) blocks replaces a per-candidate scan of N x N solves.
    """

    def __init__(self, candidates: Sequence[PipelinePath]):
        if not candidates:
            raise EmptyPathSet("no candidates to design over")
        self.candidates = list(candidates)
        self._pool = np.stack([c.as_array() for c in self.candidates])
        self._diag = np.einsum("ij,ij->i", self._pool, self._pool)
        self._n_dims = self._pool.shape[1]
        self._chosen: list[np.ndarray] = []
        self._gram = np.zeros((self._n_dims, self._n_dims))

    @property
    def num_selected(self) -> int:
        return len(self._chosen)

    @property
    def gram(self) -> np.ndarray:
        return self._gram.copy()

    def add(self, path: PipelinePath) -> None:
        p = path.as_array()
        self._chosen.append(p)
        self._gram += np.outer(p, p)

    def propose(self) -> PipelinePath:
        m = len(self._chosen)
        if m + 1 > self._n_dims:
            # compact blocks would outgrow the full Gram; the plain scan
            # is cheaper (and bounded) from here on
            return greedy_online_next(self.candidates, self._gram)
        n_cands = len(self.candidates)
        small = np.empty((n_cands, m + 1, m + 1))
        if m:
            sel = np.stack(self._chosen)
            small[:, :m, :m] = sel @ sel.T
            cross = self._pool @ sel.T
            small[:, :m, m] = cross
            small[:, m, :m] = cross
        small[:, m, m] = self._diag
        eigs = np.linalg.eigvalsh(small)[:, ::-1]
        top = eigs[:, : min(m + 1, self._n_dims)]
        scores = np.sum(np.log(np.maximum(top, 0.0) + EIG_EPSILON), axis=1)
        tied = np.flatnonzero(scores >= scores.max() - TIE_TOLERANCE)
        best = min(tied, key=lambda i: self.candidates[i].step_indices)
        return self.candidates[best]


def greedy_batch_design(
    candidates: list[PipelinePath], n_init: int, rng: RngLike = None
) -> list[PipelinePath]:
    """Pick n_init paths: a random start, then greedy criterion argmax.

    Candidates may be selected more than once; with the epsilon-floored
    log criterion that only happens when no unselected direction helps.
    """
    if not candidates:
        raise EmptyPathSet("no candidates to design over")
    if n_init < 1:
        raise ValueError("n_init must be at least 1")
    gen = as_generator(rng)
    first = candidates[int(gen.integers(len(candidates)))]
    state = DesignState.empty(len(first.onehot)).add(first)
    while len(state.selected) < n_init:
        state = state.add(greedy_online_next(candidates, state.gram))
    return list(state.selected)
