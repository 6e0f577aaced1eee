"""Pipeline step executors.

Two implementations of the same step-granular interface: a synthetic
benchmark with known ground truth (simulated time, used by tests and
the default CLI mode), and a client that drives an external worker
process over newline-delimited JSON frames on stdin/stdout.

A step call hands over the previous step's output handle, the chosen
algorithm with its hyperparameters, and a time allowance; it returns
the new output handle, the seconds spent, and, on the final step, the
pipeline's metric (lower is better).
"""

from __future__ import annotations

import json
import math
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .canonical import canonical_json, digest128, digest128_int
from .errors import (
    ExecutorFailure,
    HandshakeFailure,
    ProtocolViolation,
    StepTimeout,
    WorkerExited,
)
from .graph import (
    HyperparamAssignment,
    HyperparamSpec,
    PipelinePath,
    PipelineSpec,
    RngLike,
    as_generator,
    encode_path,
    enumerate_paths,
    spec_digest,
)

HANDSHAKE_TIMEOUT_S = 10.0
DEFAULT_NOISE_SD = 0.02
DEFAULT_PAYLOAD_BYTES = 65536


@dataclass(frozen=True)
class DatasetHandle:
    """Opaque token for a dataset living inside an executor session."""

    id: str
    origin: str  # "input" or "step-output"
    size_bytes: int


@dataclass(frozen=True)
class StepResult:
    handle: DatasetHandle
    seconds: float
    metric: float | None = None


@dataclass(frozen=True)
class StepRecord:
    status: str  # "executed" or "cached"
    seconds: float


@dataclass(frozen=True)
class RunResult:
    """Outcome of running a full pipeline configuration."""

    metric: float
    cost_seconds: float
    per_step: tuple[StepRecord, ...]

    def __post_init__(self):
        if not math.isfinite(self.metric):
            raise ExecutorFailure(f"run produced a non-finite metric: {self.metric}")

    @property
    def cache_hits(self) -> int:
        return sum(1 for s in self.per_step if s.status == "cached")

    @property
    def cache_misses(self) -> int:
        return sum(1 for s in self.per_step if s.status == "executed")


class StepExecutor(Protocol):
    """What the cache-aware runner needs from any executor."""

    @property
    def dataset_id(self) -> str: ...

    @property
    def time_mode(self) -> str: ...

    def root_handle(self) -> DatasetHandle: ...

    def run_step(
        self,
        input_handle: DatasetHandle,
        algorithm_id: str,
        hyperparams: dict[str, Any],
        *,
        step_index: int,
        is_last: bool,
        timeout_s: float,
    ) -> StepResult: ...


def _config_key(path_ids: tuple[str, ...], assignment: HyperparamAssignment) -> str:
    return canonical_json({"path": list(path_ids), "hyperparams": assignment})


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class _Bowl:
    """Quadratic penalty for one numeric hyperparameter.

    Distances live on the dimension's canonical axis and are divided by
    its span, so every bowl contributes in [0, 1] before weighting.
    """

    hyperparam: HyperparamSpec
    target: float  # canonical coordinates

    def value(self, raw: Any) -> float:
        v = raw
        if self.hyperparam.kind == "integer":
            v = round(float(raw))
        x = self.hyperparam.to_canonical(v)
        lo, hi = self.hyperparam.canonical_bounds()
        return ((x - self.target) / (hi - lo)) ** 2

    def min_value(self) -> float:
        if self.hyperparam.kind == "integer":
            return min(self.value(c) for c in self._nearest_ints())
        return 0.0

    def best_raw(self) -> Any:
        if self.hyperparam.kind == "integer":
            return min(self._nearest_ints(), key=self.value)
        return self.hyperparam.from_canonical(self.target)

    def _nearest_ints(self) -> list[int]:
        lo, hi = self.hyperparam.bounds
        raw = self.hyperparam.from_canonical(self.target)
        cands = {int(min(max(math.floor(raw + d), lo), hi)) for d in (0, 1)}
        return sorted(cands)


@dataclass(frozen=True)
class SyntheticBenchmark:
    """Ground-truth objective: additive per-algorithm terms plus bowls.

    metric = sum of true_beta over path algorithms
           + per-algorithm weight * sum of bowl penalties
           + N(0, noise_sd^2) noise, drawn reproducibly from
             (seed, path, hyperparams) so identical runs agree.

    cost = sum of true_cost over path algorithms, deterministic.
    """

    spec: PipelineSpec
    seed: int
    noise_sd: float
    true_beta: dict[str, float]
    true_cost: dict[str, float]
    bowl_weight: dict[str, float]
    bowls: dict[str, tuple[_Bowl, ...]]

    def noiseless_metric(self, path: PipelinePath, assignment: HyperparamAssignment) -> float:
        total = 0.0
        for aid in path.algorithm_ids:
            total += self.true_beta[aid]
            w = self.bowl_weight[aid]
            for bowl in self.bowls[aid]:
                total += w * bowl.value(assignment[aid][bowl.hyperparam.name])
        return total

    def noise(self, path: PipelinePath, assignment: HyperparamAssignment) -> float:
        if self.noise_sd == 0.0:
            return 0.0
        key = digest128_int(f"{self.seed}|" + _config_key(path.algorithm_ids, assignment))
        # Box-Muller on the digest's two 64-bit halves: exact N(0, sd^2),
        # reproducible from (seed, config) alone.
        u1 = ((key >> 64) + 1) / (2.0**64 + 1)
        u2 = (key & 0xFFFFFFFFFFFFFFFF) / 2.0**64
        z = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return self.noise_sd * z

    def metric(self, path: PipelinePath, assignment: HyperparamAssignment) -> float:
        return self.noiseless_metric(path, assignment) + self.noise(path, assignment)

    def cost(self, path: PipelinePath) -> float:
        return sum(self.true_cost[aid] for aid in path.algorithm_ids)

    def path_floor(self, path: PipelinePath) -> float:
        """Best achievable noiseless metric on a path."""
        total = 0.0
        for aid in path.algorithm_ids:
            total += self.true_beta[aid]
            w = self.bowl_weight[aid]
            total += w * sum(b.min_value() for b in self.bowls[aid])
        return total

    def beta_sum(self, path: PipelinePath) -> float:
        return sum(self.true_beta[aid] for aid in path.algorithm_ids)

    def optimal_path(self) -> PipelinePath:
        """argmin of the per-path beta sum, the hyperparameter-free optimum."""
        return min(enumerate_paths(self.spec), key=lambda p: (self.beta_sum(p), p.step_indices))

    def optimum(self) -> tuple[PipelinePath, HyperparamAssignment, float]:
        """Globally best configuration and its noiseless metric."""
        best = min(enumerate_paths(self.spec), key=lambda p: (self.path_floor(p), p.step_indices))
        assignment: HyperparamAssignment = {}
        for aid in best.algorithm_ids:
            alg = self.spec.algorithm(aid)
            if not alg.hyperparams:
                continue
            values: dict[str, Any] = {}
            by_name = {b.hyperparam.name: b for b in self.bowls[aid]}
            for h in alg.hyperparams:
                if h.name in by_name:
                    values[h.name] = by_name[h.name].best_raw()
                else:
                    values[h.name] = h.default_value()
            assignment[aid] = values
        return best, assignment, self.path_floor(best)


def make_synthetic(
    spec: PipelineSpec, rng: RngLike = 0, noise_sd: float = DEFAULT_NOISE_SD
) -> SyntheticBenchmark:
    """Draw a benchmark instance: per-algorithm losses, costs, and bowls.

    Losses are uniform on [0, 1]; costs log-uniform on [0.01, 2]
    seconds; every numeric hyperparameter gets a bowl with its target
    uniform over the canonical axis. Bowl weights are kept small
    relative to the loss terms and shrink with the number of bowl
    dimensions so path identity stays the first-order effect.
    """
    gen = as_generator(rng)
    seed = int(gen.integers(2**63)) if not isinstance(rng, (int, np.integer)) else int(rng)
    draw = np.random.default_rng([seed, 0x5EED])
    true_beta: dict[str, float] = {}
    true_cost: dict[str, float] = {}
    bowl_weight: dict[str, float] = {}
    bowls: dict[str, tuple[_Bowl, ...]] = {}
    for step in spec.steps:
        for alg in step.algorithms:
            true_beta[alg.id] = float(draw.uniform(0.0, 1.0))
            true_cost[alg.id] = float(np.exp(draw.uniform(np.log(0.01), np.log(2.0))))
            dims = []
            for h in alg.hyperparams:
                if h.kind in ("continuous", "integer"):
                    lo, hi = h.canonical_bounds()
                    dims.append(_Bowl(hyperparam=h, target=float(draw.uniform(lo, hi))))
            bowls[alg.id] = tuple(dims)
            base = float(draw.uniform(0.0, 0.15))
            bowl_weight[alg.id] = base / max(1, len(dims))
    return SyntheticBenchmark(
        spec=spec,
        seed=seed,
        noise_sd=float(noise_sd),
        true_beta=true_beta,
        true_cost=true_cost,
        bowl_weight=bowl_weight,
        bowls=bowls,
    )


class SyntheticExecutor:
    """Step executor over a SyntheticBenchmark; time is simulated.

    Handles map to the prefix of (algorithm, hyperparams) pairs applied
    so far, which is all the state the benchmark needs to produce the
    terminal metric.
    """

    time_mode = "simulated"

    def __init__(self, benchmark: SyntheticBenchmark, payload_bytes: int = DEFAULT_PAYLOAD_BYTES):
        self.benchmark = benchmark
        self.payload_bytes = payload_bytes
        self.invocations = 0
        self._root_id = f"synthetic-{spec_digest(benchmark.spec)[:12]}-{benchmark.seed}"
        # token -> ((algorithm, hyperparams-json) pairs, their serialized form);
        # the serialization grows per step so tokens never re-render the prefix
        self._prefixes: dict[str, tuple[tuple[tuple[str, str], ...], str]] = {
            self._root_id: ((), "")
        }
        self._token_head = f'{{"dataset":{json.dumps(self._root_id)},"prefix":['

    @property
    def dataset_id(self) -> str:
        return self._root_id

    def root_handle(self) -> DatasetHandle:
        return DatasetHandle(id=self._root_id, origin="input", size_bytes=self.payload_bytes)

    def run_step(
        self,
        input_handle: DatasetHandle,
        algorithm_id: str,
        hyperparams: dict[str, Any],
        *,
        step_index: int,
        is_last: bool,
        timeout_s: float,
    ) -> StepResult:
        entry = self._prefixes.get(input_handle.id)
        if entry is None:
            raise ExecutorFailure(f"unknown input handle {input_handle.id!r}")
        prefix, body = entry
        if len(prefix) != step_index:
            raise ExecutorFailure(
                f"handle {input_handle.id!r} holds {len(prefix)} steps, expected {step_index}"
            )
        self.invocations += 1
        seconds = self.benchmark.true_cost[algorithm_id]
        if seconds > timeout_s:
            raise StepTimeout(
                f"step {algorithm_id!r} needs {seconds:.3f}s, only {timeout_s:.3f}s allowed"
            )
        params = canonical_json(hyperparams)
        new_prefix = prefix + ((algorithm_id, params),)
        body += ("," if prefix else "") + f"[{json.dumps(algorithm_id)},{json.dumps(params)}]"
        token = digest128(self._token_head + body + "]}")
        self._prefixes[token] = (new_prefix, body)
        metric = None
        if is_last:
            path_ids = tuple(aid for aid, _ in new_prefix)
            path = encode_path(self.benchmark.spec, path_ids)
            assignment: HyperparamAssignment = {
                aid: json.loads(params) for aid, params in new_prefix if params != "{}"
            }
            metric = self.benchmark.metric(path, assignment)
        return StepResult(
            handle=DatasetHandle(id=token, origin="step-output", size_bytes=self.payload_bytes),
            seconds=seconds,
            metric=metric,
        )


def make_synthetic_executor(
    spec: PipelineSpec, rng: RngLike = 0, noise_sd: float = DEFAULT_NOISE_SD
) -> SyntheticExecutor:
    return SyntheticExecutor(make_synthetic(spec, rng, noise_sd))


# ---------------------------------------------------------------------------
# external worker client


class ExternalExecutor:
    """Client side of the worker wire protocol.

    One request in flight at a time; every run_step is a strict
    request/response exchange matched on req_id.
    """

    def __init__(self, command: str | list[str], spec: PipelineSpec):
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not argv:
            raise ExecutorFailure("empty worker command")
        self._digest = spec_digest(spec)
        try:
            self._proc = subprocess.Popen(
                argv,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise HandshakeFailure(f"cannot spawn worker: {exc}") from exc
        self._lines: queue.Queue[str | None] = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        self._req_id = 0
        self._closed = False
        self.time_mode = self._handshake()

    def _pump(self):
        try:
            for line in self._proc.stdout:
                self._lines.put(line)
        finally:
            self._lines.put(None)

    def _send(self, frame: dict[str, Any]) -> None:
        try:
            self._proc.stdin.write(json.dumps(frame) + "\n")
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise WorkerExited(f"worker closed its stdin pipe: {exc}") from exc

    def _recv(self, timeout_s: float) -> dict[str, Any]:
        try:
            line = self._lines.get(timeout=timeout_s)
        except queue.Empty:
            raise StepTimeout(f"worker sent no response within {timeout_s:.1f}s") from None
        if line is None:
            raise WorkerExited("worker closed stdout before responding")
        try:
            frame = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolViolation(f"worker sent invalid JSON: {line!r}") from exc
        if not isinstance(frame, dict) or not isinstance(frame.get("type"), str):
            raise ProtocolViolation(f"worker frame has no type: {line!r}")
        return frame

    def _handshake(self) -> str:
        self._send({"type": "hello", "version": 1, "spec_digest": self._digest})
        try:
            frame = self._recv(HANDSHAKE_TIMEOUT_S)
        except (StepTimeout, WorkerExited, ProtocolViolation) as exc:
            self.close(kill=True)
            raise HandshakeFailure(f"hello exchange failed: {exc}") from exc
        if frame.get("type") != "hello_ok" or frame.get("time_mode") not in ("wall", "simulated"):
            self.close(kill=True)
            raise HandshakeFailure(f"unexpected handshake response: {frame}")
        return frame["time_mode"]

    @property
    def dataset_id(self) -> str:
        return f"external-{self._digest[:16]}"

    def root_handle(self) -> DatasetHandle:
        return DatasetHandle(id="input", origin="input", size_bytes=1)

    def run_step(
        self,
        input_handle: DatasetHandle,
        algorithm_id: str,
        hyperparams: dict[str, Any],
        *,
        step_index: int,
        is_last: bool,
        timeout_s: float,
    ) -> StepResult:
        self._req_id += 1
        req_id = self._req_id
        self._send(
            {
                "type": "run_step",
                "req_id": req_id,
                "step": step_index + 1,
                "algorithm": algorithm_id,
                "hyperparams": hyperparams,
                "input_handle": input_handle.id,
                "is_last": is_last,
            }
        )
        try:
            # Small grace on top of the allowance: the worker measures its
            # own step time, the client only guards against a hang.
            frame = self._recv(timeout_s + 1.0)
        except StepTimeout:
            self.close(kill=True)
            raise
        if frame.get("type") == "step_err":
            if frame.get("req_id") != req_id:
                raise ProtocolViolation(f"step_err for req {frame.get('req_id')}, expected {req_id}")
            raise ExecutorFailure(f"worker failed step: {frame.get('message', '(no message)')}")
        if frame.get("type") != "step_ok":
            raise ProtocolViolation(f"expected step_ok, got {frame}")
        if frame.get("req_id") != req_id:
            raise ProtocolViolation(f"response for req {frame.get('req_id')}, expected {req_id}")
        handle = frame.get("output_handle")
        seconds = frame.get("seconds")
        metric = frame.get("metric")
        if not isinstance(handle, str) or not isinstance(seconds, (int, float)):
            raise ProtocolViolation(f"malformed step_ok frame: {frame}")
        if is_last and not isinstance(metric, (int, float)):
            raise ProtocolViolation("terminal step_ok carried no metric")
        if not is_last and metric is not None:
            raise ProtocolViolation("non-terminal step_ok carried a metric")
        if float(seconds) > timeout_s:
            self.close(kill=True)
            raise StepTimeout(f"worker reported {seconds:.1f}s, above the {timeout_s:.1f}s allowance")
        return StepResult(
            handle=DatasetHandle(id=handle, origin="step-output", size_bytes=1),
            seconds=float(seconds),
            metric=None if metric is None else float(metric),
        )

    def close(self, kill: bool = False) -> None:
        if self._closed:
            return
        self._closed = True
        if not kill and self._proc.poll() is None:
            try:
                self._send({"type": "shutdown"})
            except WorkerExited:
                pass
        try:
            self._proc.wait(timeout=2.0)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()
        if self._proc.stdin:
            self._proc.stdin.close()

    def __enter__(self) -> "ExternalExecutor":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def spawn_external(command: str | list[str], spec: PipelineSpec) -> ExternalExecutor:
    """Start a worker process and complete the hello handshake."""
    return ExternalExecutor(command, spec)
