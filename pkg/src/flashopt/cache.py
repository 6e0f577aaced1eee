"""Prefix cache for pipeline runs.

Two configurations that agree on their first k steps (same algorithms,
same hyperparameters, same dataset) produce the same intermediate
after step k, so that intermediate is stored under a digest of the
canonical prefix serialization. A later run walks its steps front to
back, reusing the longest cached prefix and executing only the rest.

Entries are held in memory under a byte budget with least-recently-
used eviction. Eviction happens at insert time only; a lookup can
never shrink the pool.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any

from .canonical import canonical_json, digest128
from .errors import ExecutorFailure, StepTimeout
from .executor import (
    DatasetHandle,
    RunResult,
    StepExecutor,
    StepRecord,
)
from .graph import HyperparamAssignment, PipelinePath

DEFAULT_CACHE_BUDGET_BYTES = 1 << 30  # 1 GiB


@dataclass(frozen=True)
class CachedStep:
    """What a prefix resolves to: the intermediate, plus the metric
    when the prefix is the whole pipeline."""

    handle: DatasetHandle
    metric: float | None


@dataclass
class CacheEntry:
    key: str
    payload: CachedStep
    size_bytes: int
    last_used: int


def prefix_cache_key(
    dataset_id: str,
    path: PipelinePath,
    assignment: HyperparamAssignment,
    depth: int,
) -> str:
    """Digest of the first `depth` steps of a configuration."""
    steps = []
    for aid in path.algorithm_ids[:depth]:
        steps.append({"algorithm": aid, "hyperparams": assignment.get(aid, {})})
    return digest128(canonical_json({"dataset": dataset_id, "steps": steps}))


def prefix_cache_keys(
    dataset_id: str,
    path: PipelinePath,
    assignment: HyperparamAssignment,
) -> list[str]:
    """Keys for every prefix depth at once, one per step.

    Equal to [prefix_cache_key(..., d) for d in 1..K]; each step's
    serialization is reused by the deeper prefixes instead of being
    rebuilt per depth.
    """
    head = f'{{"dataset":{json.dumps(dataset_id)},"steps":['
    body = ""
    keys: list[str] = []
    for k, aid in enumerate(path.algorithm_ids):
        step = canonical_json({"algorithm": aid, "hyperparams": assignment.get(aid, {})})
        body += ("," if k else "") + step
        keys.append(digest128(head + body + "]}"))
    return keys


class CachePool:
    """LRU pool of prefix results under a byte budget."""

    def __init__(self, budget_bytes: int = DEFAULT_CACHE_BUDGET_BYTES):
        if budget_bytes < 0:
            raise ValueError("cache budget must be nonnegative")
        self.budget_bytes = int(budget_bytes)
        self.used_bytes = 0
        self.hits = 0
        self.misses = 0
        self._tick = 0
        self._entries: "OrderedDict[str, CacheEntry]" = OrderedDict()

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, key: str) -> CachedStep | None:
        entry = self._entries.get(key)
        if entry is None:
            self.misses += 1
            return None
        self.hits += 1
        self._tick += 1
        entry.last_used = self._tick
        self._entries.move_to_end(key)
        return entry.payload

    def insert(self, key: str, payload: CachedStep, size_bytes: int) -> bool:
        """Store a prefix result; returns False when it cannot fit at all."""
        size_bytes = max(1, int(size_bytes))
        if size_bytes > self.budget_bytes:
            return False
        self._tick += 1
        old = self._entries.pop(key, None)
        if old is not None:
            self.used_bytes -= old.size_bytes
        self._entries[key] = CacheEntry(
            key=key, payload=payload, size_bytes=size_bytes, last_used=self._tick
        )
        self.used_bytes += size_bytes
        while self.used_bytes > self.budget_bytes:
            _, victim = self._entries.popitem(last=False)
            self.used_bytes -= victim.size_bytes
        return True


def lookup(pool: CachePool, key: str) -> CachedStep | None:
    return pool.lookup(key)


def insert(pool: CachePool, key: str, payload: CachedStep, size_bytes: int) -> bool:
    return pool.insert(key, payload, size_bytes)


def run_pipeline_with_cache(
    executor: StepExecutor,
    path: PipelinePath,
    assignment: HyperparamAssignment,
    pool: CachePool,
    per_run_timeout_s: float = float("inf"),
) -> RunResult:
    """Run one configuration end to end, reusing cached prefixes.

    Each step's time allowance is whatever remains of the per-run
    budget after the executed steps before it.
    """
    dataset_id = executor.dataset_id
    handle = executor.root_handle()
    metric: float | None = None
    executed_seconds = 0.0
    records: list[StepRecord] = []
    last = len(path.algorithm_ids) - 1
    keys = prefix_cache_keys(dataset_id, path, assignment)
    for k, aid in enumerate(path.algorithm_ids):
        key = keys[k]
        cached = pool.lookup(key)
        if cached is not None:
            handle = cached.handle
            metric = cached.metric
            records.append(StepRecord(status="cached", seconds=0.0))
            continue
        remaining = per_run_timeout_s - executed_seconds
        if remaining <= 0:
            raise StepTimeout(f"per-run budget exhausted before step {k + 1}")
        result = executor.run_step(
            handle,
            aid,
            assignment.get(aid, {}),
            step_index=k,
            is_last=(k == last),
            timeout_s=remaining,
        )
        executed_seconds += result.seconds
        handle = result.handle
        metric = result.metric
        pool.insert(
            key,
            CachedStep(handle=result.handle, metric=result.metric),
            result.handle.size_bytes,
        )
        records.append(StepRecord(status="executed", seconds=result.seconds))
    if metric is None:
        raise ExecutorFailure("pipeline finished without a terminal metric")
    return RunResult(metric=metric, cost_seconds=executed_seconds, per_step=tuple(records))
