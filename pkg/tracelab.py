"""Latency analysis over packet logs and per-exchange stage traces.

Packet logs come from the controller; stage traces are filled in by a
``TraceSink`` that every component reports to as a request or response
passes by. Everything here is plain post-processing: numbers in, numbers
and CSV files out.
"""

import csv
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from clockcore import Instant
from config import get_logger
from controller import Direction, PacketLogRecord
from crtp import PacketKind, decode_crtp
from errors import ArtifactError, CodecError, EmptyInput, MissingTimestamp, SchemaMismatch

logger = get_logger("tracelab")

STAGES = (
    "controller_send",
    "transport_tx",
    "bridge_in",
    "serial_tx",
    "drone_rx",
    "drone_tx",
    "serial_rx",
    "bridge_out",
    "transport_rx",
    "controller_recv",
)

# interval -> stages it spans; a four-stage interval is the sum of two spans
INTERVALS = {
    "end_to_end": ("controller_send", "controller_recv"),
    "transport_roundtrip": ("controller_send", "bridge_in", "bridge_out", "controller_recv"),
    "bridge_residence": ("bridge_in", "bridge_out"),
    "serial_roundtrip": ("serial_tx", "serial_rx"),
    "drone_processing": ("drone_rx", "drone_tx"),
    "packet_handling": ("bridge_in", "serial_tx", "serial_rx", "bridge_out"),
}

# intervals mixing timestamps from two hosts in a live run
CROSS_HOST_INTERVALS = frozenset({"transport_roundtrip"})

PACKET_LOG_HEADER = ["run_id", "token", "kind", "direction", "timestamp_us"]
TRACE_HEADER = ["run_id", "exchange", "token", *STAGES]
CDF_HEADER = ["value", "fraction"]
STATS_HEADER = [
    "interval",
    "count",
    "min",
    "q1",
    "median",
    "q3",
    "max",
    "whisker_low",
    "whisker_high",
    "outliers",
    "approximate",
]

# inter-packet-time histogram bins, milliseconds
IPT_BINS_MS = (0, 5, 10, 20, 50, 100, 150, 199, 201, 250, 500, 1000, float("inf"))


@dataclass
class TraceRecord:
    run_id: int
    exchange: int
    token: int
    controller_send: Optional[Instant] = None
    transport_tx: Optional[Instant] = None
    bridge_in: Optional[Instant] = None
    serial_tx: Optional[Instant] = None
    drone_rx: Optional[Instant] = None
    drone_tx: Optional[Instant] = None
    serial_rx: Optional[Instant] = None
    bridge_out: Optional[Instant] = None
    transport_rx: Optional[Instant] = None
    controller_recv: Optional[Instant] = None


@dataclass(frozen=True)
class CdfSeries:
    values: tuple[int, ...]
    fractions: tuple[float, ...]


@dataclass(frozen=True)
class StageStats:
    count: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    whisker_low: float
    whisker_high: float
    outliers: int
    name: str = ""
    approximate: bool = False


class TraceSink:
    """Collects stage timestamps keyed by request token, first occurrence wins.

    Requests are not pipelined, so at most one exchange per token is open;
    ``begin`` for a reused token starts a fresh record.
    """

    def __init__(self, run_id: int = 0):
        self.run_id = run_id
        self.records: list[TraceRecord] = []
        self._open: dict[int, TraceRecord] = {}

    def begin(self, token: int, now: Instant) -> TraceRecord:
        record = TraceRecord(self.run_id, len(self.records), token, controller_send=now)
        self.records.append(record)
        self._open[token] = record
        return record

    def mark(self, token: int, stage: str, now: Instant) -> None:
        record = self._open.get(token)
        if record is not None and getattr(record, stage) is None:
            setattr(record, stage, now)

    def observe(self, stage: str, crtp_bytes: bytes, now: Instant) -> None:
        """Mark ``stage`` for whatever request or response ``crtp_bytes`` carries; setpoints are ignored."""
        try:
            token = decode_crtp(crtp_bytes).token
        except CodecError:
            return
        if token is not None:
            self.mark(token, stage, now)


def _by_run(log: Iterable[PacketLogRecord]) -> dict[int, list[PacketLogRecord]]:
    runs: dict[int, list[PacketLogRecord]] = {}
    for record in log:
        runs.setdefault(record.run_id, []).append(record)
    return runs


def ipt(log: Sequence[PacketLogRecord], kinds: Optional[set[PacketKind]] = None) -> list[int]:
    """Gaps between consecutive outgoing packets, per run, in microseconds."""
    gaps: list[int] = []
    for records in _by_run(log).values():
        stamps = sorted(
            r.timestamp for r in records if r.direction == Direction.OUT and (kinds is None or r.kind in kinds)
        )
        gaps.extend(int(g) for g in np.diff(stamps))
    return gaps


def ipt_by_series(log: Sequence[PacketLogRecord]) -> dict[str, list[int]]:
    return {
        "setpoint": ipt(log, {PacketKind.SETPOINT}),
        "request": ipt(log, {PacketKind.REQUEST}),
    }


def rtt(log: Sequence[PacketLogRecord]) -> list[int]:
    """First request out to first response in, one sample per answered exchange.

    Resends and duplicate responses are ignored; an exchange still open when
    the next token goes out was never answered and yields nothing.
    """
    samples: list[int] = []
    for records in _by_run(log).values():
        open_exchange: Optional[tuple[int, Instant]] = None
        for r in records:
            if r.kind == PacketKind.REQUEST and r.direction == Direction.OUT:
                if open_exchange is None or open_exchange[0] != r.token:
                    open_exchange = (r.token, r.timestamp)
            elif r.kind == PacketKind.RESPONSE and r.direction == Direction.IN:
                if open_exchange is not None and open_exchange[0] == r.token:
                    samples.append(r.timestamp - open_exchange[1])
                    open_exchange = None
    return samples


def cdf(samples: Sequence[float]) -> CdfSeries:
    if len(samples) == 0:
        raise EmptyInput("cannot build a CDF from zero samples")
    values, counts = np.unique(np.asarray(samples), return_counts=True)
    fractions = np.cumsum(counts) / len(samples)
    return CdfSeries(tuple(v.item() for v in values), tuple(float(f) for f in fractions))


def stage_decompose(trace: TraceRecord, intervals: Iterable[str] = INTERVALS) -> dict[str, int]:
    out = {}
    for name in intervals:
        needed = INTERVALS[name]
        for stage in needed:
            if getattr(trace, stage) is None:
                raise MissingTimestamp(stage)
        t = [getattr(trace, stage) for stage in needed]
        out[name] = (t[1] - t[0]) + (t[3] - t[2]) if len(t) == 4 else t[1] - t[0]
    return out


def interval_samples(traces: Iterable[TraceRecord]) -> dict[str, list[int]]:
    """Per-interval samples from every trace that has the stamps for it."""
    samples: dict[str, list[int]] = {name: [] for name in INTERVALS}
    for trace in traces:
        for name in INTERVALS:
            try:
                samples[name].append(stage_decompose(trace, [name])[name])
            except MissingTimestamp:
                continue
    return samples


def boxstats(samples: Sequence[float], name: str = "", approximate: bool = False) -> StageStats:
    if len(samples) == 0:
        raise EmptyInput("box statistics need at least one sample")
    data = np.asarray(samples, dtype=float)
    q1, median, q3 = np.percentile(data, [25, 50, 75])
    iqr = q3 - q1
    low_fence, high_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = data[(data >= low_fence) & (data <= high_fence)]
    return StageStats(
        count=len(data),
        min=float(data.min()),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        max=float(data.max()),
        whisker_low=float(inside.min()),
        whisker_high=float(inside.max()),
        outliers=int(len(data) - len(inside)),
        name=name,
        approximate=approximate,
    )


def stage_stats(traces: Iterable[TraceRecord], live: bool = False) -> list[StageStats]:
    stats = []
    for name, values in interval_samples(traces).items():
        if values:
            stats.append(boxstats(values, name, approximate=live and name in CROSS_HOST_INTERVALS))
    return stats


def percentiles(samples: Sequence[float]) -> dict[str, float]:
    if len(samples) == 0:
        return {"count": 0}
    data = np.asarray(samples, dtype=float)
    p5, p25, p50, p75, p95, p99 = np.percentile(data, [5, 25, 50, 75, 95, 99])
    return {
        "count": int(len(data)),
        "min": float(data.min()),
        "p5": float(p5),
        "p25": float(p25),
        "median": float(p50),
        "p75": float(p75),
        "p95": float(p95),
        "p99": float(p99),
        "max": float(data.max()),
    }


def ipt_histogram(samples: Sequence[int]) -> list[int]:
    counts, _ = np.histogram(np.asarray(samples, dtype=float) / 1000.0, bins=IPT_BINS_MS)
    return [int(c) for c in counts]


# --- CSV artifacts ----------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_rows(path: Path, header: list[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
    except OSError as e:
        raise ArtifactError(f"cannot write: {e}", path=str(path)) from e
    return path


def _read_rows(path: Path, header: list[str]) -> list[tuple[int, dict[str, str]]]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            found = next(reader, None)
            if found != header:
                raise SchemaMismatch(f"expected header {','.join(header)}, found {found}", path=str(path), row=1)
            return [(n, dict(zip(header, row))) for n, row in enumerate(reader, start=2)]
    except OSError as e:
        raise ArtifactError(f"cannot read: {e}", path=str(path)) from e


def export_csv(data, path) -> Path:
    """Write a CdfSeries or a list of StageStats with its fixed header."""
    if isinstance(data, CdfSeries):
        return write_rows(path, CDF_HEADER, zip(data.values, data.fractions))
    rows = (
        (s.name, s.count, s.min, s.q1, s.median, s.q3, s.max, s.whisker_low, s.whisker_high, s.outliers, s.approximate)
        for s in data
    )
    return write_rows(path, STATS_HEADER, rows)


def write_packet_log(log: Iterable[PacketLogRecord], path) -> Path:
    rows = ((r.run_id, r.token, r.kind.value, r.direction.value, r.timestamp) for r in log)
    return write_rows(path, PACKET_LOG_HEADER, rows)


def read_packet_log(path) -> list[PacketLogRecord]:
    records = []
    for n, row in _read_rows(path, PACKET_LOG_HEADER):
        try:
            records.append(
                PacketLogRecord(
                    run_id=int(row["run_id"]),
                    token=int(row["token"]) if row["token"] else None,
                    kind=PacketKind(row["kind"]),
                    direction=Direction(row["direction"]),
                    timestamp=int(row["timestamp_us"]),
                )
            )
        except (KeyError, ValueError) as e:
            raise ArtifactError(f"bad packet log row: {e}", path=str(path), row=n) from e
    return records


def write_traces(traces: Iterable[TraceRecord], path) -> Path:
    rows = ([getattr(t, f.name) for f in fields(TraceRecord)] for t in traces)
    return write_rows(path, TRACE_HEADER, rows)


def read_traces(path) -> list[TraceRecord]:
    traces = []
    for n, row in _read_rows(path, TRACE_HEADER):
        try:
            values = {k: (int(v) if v != "" else None) for k, v in row.items()}
            traces.append(TraceRecord(**values))
        except (TypeError, ValueError) as e:
            raise ArtifactError(f"bad trace row: {e}", path=str(path), row=n) from e
    return traces


def read_cdf(path) -> CdfSeries:
    values, fractions = [], []
    for n, row in _read_rows(path, CDF_HEADER):
        try:
            values.append(int(row["value"]))
            fractions.append(float(row["fraction"]))
        except (KeyError, ValueError) as e:
            raise ArtifactError(f"bad CDF row: {e}", path=str(path), row=n) from e
    return CdfSeries(tuple(values), tuple(fractions))
