"""Run traces: one CSV row per evaluated configuration.

Rows are written as soon as a run finishes and the file is flushed
after every row, so an interrupted session keeps everything it paid
for. Float columns are rendered with Python's shortest round-trip
repr, which makes traces byte-identical across runs of the same seed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import TraceParseError

TRACE_HEADER = [
    "iter",
    "phase",
    "wall_clock_s",
    "path",
    "hyperparams_json",
    "metric",
    "cost_s",
    "best_so_far",
    "cache_hits",
    "cache_misses",
]


@dataclass(frozen=True)
class TraceRow:
    iter: int
    phase: int
    wall_clock_s: float
    path: str
    hyperparams_json: str
    metric: float
    cost_s: float
    best_so_far: float
    cache_hits: int
    cache_misses: int


class TraceWriter:
    """Streams rows to a CSV file, flushing as it goes."""

    def __init__(self, path: str | Path):
        self._fh = open(path, "w", encoding="utf-8", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(TRACE_HEADER)
        self._fh.flush()
        self.rows: list[TraceRow] = []

    def write(self, row: TraceRow) -> None:
        self._writer.writerow(
            [
                row.iter,
                row.phase,
                repr(row.wall_clock_s),
                row.path,
                row.hyperparams_json,
                repr(row.metric),
                repr(row.cost_s),
                repr(row.best_so_far),
                row.cache_hits,
                row.cache_misses,
            ]
        )
        self._fh.flush()
        self.rows.append(row)

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.flush()
            self._fh.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class NullTraceWriter:
    """Collects rows without touching the filesystem."""

    def __init__(self):
        self.rows: list[TraceRow] = []

    def write(self, row: TraceRow) -> None:
        self.rows.append(row)

    def close(self) -> None:
        pass


def read_trace(path: str | Path) -> list[TraceRow]:
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise TraceParseError(f"cannot open trace: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceParseError("trace file is empty") from None
        if header != TRACE_HEADER:
            raise TraceParseError(f"unexpected trace header: {header}")
        rows: list[TraceRow] = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(TRACE_HEADER):
                raise TraceParseError(f"line {lineno}: expected {len(TRACE_HEADER)} columns")
            try:
                rows.append(
                    TraceRow(
                        iter=int(rec[0]),
                        phase=int(rec[1]),
                        wall_clock_s=float(rec[2]),
                        path=rec[3],
                        hyperparams_json=rec[4],
                        metric=float(rec[5]),
                        cost_s=float(rec[6]),
                        best_so_far=float(rec[7]),
                        cache_hits=int(rec[8]),
                        cache_misses=int(rec[9]),
                    )
                )
            except ValueError as exc:
                raise TraceParseError(f"line {lineno}: {exc}") from exc
    if not rows:
        raise TraceParseError("trace file has a header but no rows")
    return rows
