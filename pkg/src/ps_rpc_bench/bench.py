"""
Benchmark drivers: point-to-point latency, point-to-point bandwidth and
parameter-server throughput.

Every repeat runs a warmup phase followed by a measurement window. RPCs that
start before the warmup boundary are executed but never recorded; the RPC in
flight when the window closes completes and counts.
"""

import threading
import time
import typing as T
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone

import numpy as np
from ryutils import log

from ps_rpc_bench.config import Benchmark, BenchConfig, Direction
from ps_rpc_bench.errors import (
    BenchError,
    ConnectError,
    IntegrityError,
    RunFailure,
    StartupError,
    StatsError,
)
from ps_rpc_bench.monitor import MonitorSession, ResourceSeries, start_monitor
from ps_rpc_bench.rpc import Connection, Endpoint, connect
from ps_rpc_bench.transport import NetCounters
from ps_rpc_bench.wire import MsgType
from ps_rpc_bench.workload import Payload, PayloadSpec, materialize

MBYTE = float(1 << 20)
PERCENTILES = (50, 90, 99)
WORKER_CONNECT_ATTEMPTS = 5


def utc_now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class LatencyStats:
    count: int
    mean_us: float
    min_us: float
    max_us: float
    p50_us: float
    p90_us: float
    p99_us: float

    def metrics(self) -> T.Dict[str, float]:
        return {
            "count": float(self.count),
            "mean_us": self.mean_us,
            "min_us": self.min_us,
            "max_us": self.max_us,
            "p50_us": self.p50_us,
            "p90_us": self.p90_us,
            "p99_us": self.p99_us,
        }

    def to_dict(self) -> T.Dict[str, T.Any]:
        return dict(self.metrics(), count=self.count)

    @staticmethod
    def from_dict(raw: T.Mapping[str, T.Any]) -> "LatencyStats":
        return LatencyStats(
            count=int(raw["count"]),
            mean_us=float(raw["mean_us"]),
            min_us=float(raw["min_us"]),
            max_us=float(raw["max_us"]),
            p50_us=float(raw["p50_us"]),
            p90_us=float(raw["p90_us"]),
            p99_us=float(raw["p99_us"]),
        )


@dataclass
class BandwidthResult:
    rpc_count: int
    content_bytes: int
    measured_secs: float
    mbytes_per_sec: float
    wire_tx_bytes: int = 0

    def metrics(self) -> T.Dict[str, float]:
        return {
            "rpc_count": float(self.rpc_count),
            "content_bytes": float(self.content_bytes),
            "measured_secs": self.measured_secs,
            "mbytes_per_sec": self.mbytes_per_sec,
        }

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "rpc_count": self.rpc_count,
            "content_bytes": self.content_bytes,
            "measured_secs": self.measured_secs,
            "mbytes_per_sec": self.mbytes_per_sec,
            "wire_tx_bytes": self.wire_tx_bytes,
        }

    @staticmethod
    def from_dict(raw: T.Mapping[str, T.Any]) -> "BandwidthResult":
        return BandwidthResult(
            rpc_count=int(raw["rpc_count"]),
            content_bytes=int(raw["content_bytes"]),
            measured_secs=float(raw["measured_secs"]),
            mbytes_per_sec=float(raw["mbytes_per_sec"]),
            wire_tx_bytes=int(raw.get("wire_tx_bytes", 0)),
        )


@dataclass
class WorkerThroughput:
    """One worker's measured RPC counts, one entry per PS."""

    worker_index: int
    ps_counts: T.List[int]
    duration_secs: float

    @property
    def rpc_count(self) -> int:
        return sum(self.ps_counts)

    @property
    def rpcs_per_sec(self) -> float:
        return self.rpc_count / self.duration_secs

    def metrics(self) -> T.Dict[str, float]:
        return {"rpc_count": float(self.rpc_count), "rpcs_per_sec": self.rpcs_per_sec}

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "worker_index": self.worker_index,
            "ps_counts": list(self.ps_counts),
            "duration_secs": self.duration_secs,
            "rpc_count": self.rpc_count,
            "rpcs_per_sec": self.rpcs_per_sec,
        }

    @staticmethod
    def from_dict(raw: T.Mapping[str, T.Any]) -> "WorkerThroughput":
        return WorkerThroughput(
            worker_index=int(raw["worker_index"]),
            ps_counts=[int(c) for c in raw["ps_counts"]],
            duration_secs=float(raw["duration_secs"]),
        )


@dataclass
class ThroughputResult:
    per_worker_counts: T.List[int]
    per_ps_counts: T.List[T.List[int]]
    duration_secs: float
    aggregate_rpcs_per_sec: float

    def metrics(self) -> T.Dict[str, float]:
        return {
            "total_rpcs": float(sum(self.per_worker_counts)),
            "aggregate_rpcs_per_sec": self.aggregate_rpcs_per_sec,
        }

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "per_worker_counts": list(self.per_worker_counts),
            "per_ps_counts": [list(row) for row in self.per_ps_counts],
            "duration_secs": self.duration_secs,
            "aggregate_rpcs_per_sec": self.aggregate_rpcs_per_sec,
        }

    @staticmethod
    def from_dict(raw: T.Mapping[str, T.Any]) -> "ThroughputResult":
        return ThroughputResult(
            per_worker_counts=[int(c) for c in raw["per_worker_counts"]],
            per_ps_counts=[[int(c) for c in row] for row in raw["per_ps_counts"]],
            duration_secs=float(raw["duration_secs"]),
            aggregate_rpcs_per_sec=float(raw["aggregate_rpcs_per_sec"]),
        )


Result = T.Union[LatencyStats, BandwidthResult, WorkerThroughput, ThroughputResult]


@dataclass
class Window:
    """Offsets in ms from the start of a repeat."""

    warmup_end_ms: float
    deadline_ms: float
    first_measured_ms: T.Optional[float] = None
    last_measured_end_ms: T.Optional[float] = None
    wall_secs: float = 0.0

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "warmup_end_ms": self.warmup_end_ms,
            "deadline_ms": self.deadline_ms,
            "first_measured_ms": self.first_measured_ms,
            "last_measured_end_ms": self.last_measured_end_ms,
            "wall_secs": self.wall_secs,
        }

    @staticmethod
    def from_dict(raw: T.Mapping[str, T.Any]) -> "Window":
        return Window(**raw)


@dataclass
class RepeatOutcome:
    repeat: int
    result: T.Optional[Result] = None
    error: T.Optional[str] = None
    window: T.Optional[Window] = None
    resources: T.Optional[ResourceSeries] = None

    @property
    def ok(self) -> bool:
        return self.result is not None and self.error is None

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "repeat": self.repeat,
            "ok": self.ok,
            "error": self.error,
            "result": self.result.to_dict() if self.result is not None else None,
            "window": self.window.to_dict() if self.window is not None else None,
            "resources": self.resources.to_dict() if self.resources is not None else None,
        }


def result_from_dict(benchmark: Benchmark, raw: T.Mapping[str, T.Any]) -> Result:
    if benchmark == Benchmark.LATENCY:
        return LatencyStats.from_dict(raw)
    if benchmark == Benchmark.BANDWIDTH:
        return BandwidthResult.from_dict(raw)
    if "per_ps_counts" in raw:
        return ThroughputResult.from_dict(raw)
    return WorkerThroughput.from_dict(raw)


def compute_stats(samples: T.Sequence[float]) -> LatencyStats:
    """Nearest-rank percentiles over latency samples (any unit, reported as given)."""
    if not samples:
        raise StatsError("Cannot compute latency statistics over zero samples")
    values = np.asarray(samples, dtype=np.float64)
    # inverted_cdf is the nearest-rank definition: the ceil(p * n / 100)-th smallest sample
    p50, p90, p99 = np.percentile(values, PERCENTILES, method="inverted_cdf")
    return LatencyStats(
        count=int(values.size),
        mean_us=float(values.mean()),
        min_us=float(values.min()),
        max_us=float(values.max()),
        p50_us=float(p50),
        p90_us=float(p90),
        p99_us=float(p99),
    )


@dataclass
class AggregateResult:
    averaged: T.Dict[str, float]
    successful: int
    failed: int
    errors: T.List[str] = field(default_factory=list)


def aggregate_runs(outcomes: T.Sequence[RepeatOutcome]) -> AggregateResult:
    """Arithmetic mean of each metric over the successful repeats."""
    good = [o for o in outcomes if o.ok]
    errors = [f"repeat {o.repeat}: {o.error}" for o in outcomes if not o.ok]
    if not good:
        raise RunFailure(f"All {len(outcomes)} repeats failed: {errors}")
    metrics = [o.result.metrics() for o in good if o.result is not None]
    averaged = {key: sum(m[key] for m in metrics) / len(metrics) for key in metrics[0]}
    return AggregateResult(
        averaged=averaged, successful=len(good), failed=len(outcomes) - len(good), errors=errors
    )


def _run_window(
    warmup_secs: float,
    duration_secs: float,
    rpc: T.Callable[[int, bool], None],
    session: T.Optional[MonitorSession] = None,
) -> Window:
    """Call ``rpc(start_offset_ns, measured)`` back to back until the window closes.

    ``session`` is marked around the measured RPCs so its counter deltas cover
    exactly the traffic the result counts.
    """
    t0 = time.perf_counter_ns()
    warm_end = t0 + int(warmup_secs * 1e9)
    deadline = warm_end + int(duration_secs * 1e9)
    first: T.Optional[int] = None
    last: T.Optional[int] = None
    while True:
        start = time.perf_counter_ns()
        if start >= deadline:
            break
        measured = start >= warm_end
        if measured and first is None and session is not None:
            session.mark_measure_start()
        rpc(start - t0, measured)
        if measured:
            if first is None:
                first = start
            last = time.perf_counter_ns()
    if first is not None and session is not None:
        session.mark_measure_end()
    end = time.perf_counter_ns()
    return Window(
        warmup_end_ms=(warm_end - t0) / 1e6,
        deadline_ms=(deadline - t0) / 1e6,
        first_measured_ms=(first - t0) / 1e6 if first is not None else None,
        last_measured_end_ms=(last - t0) / 1e6 if last is not None else None,
        wall_secs=(end - t0) / 1e9,
    )


def _check_echo(sent: Payload, received: T.Sequence[memoryview]) -> None:
    if len(received) != len(sent.buffers):
        raise IntegrityError(
            f"Echo returned {len(received)} buffers, expected {len(sent.buffers)}"
        )
    for index, (want, got) in enumerate(zip(sent.buffers, received)):
        if got != want:
            raise IntegrityError(f"Echoed buffer {index} differs from the sent buffer")


@dataclass
class LatencySamples:
    offsets_ms: T.List[float] = field(default_factory=list)
    rtt_us: T.List[float] = field(default_factory=list)


def measure_latency(
    cfg: BenchConfig,
    conn: Connection,
    payload: Payload,
    samples: T.Optional[LatencySamples] = None,
    session: T.Optional[MonitorSession] = None,
) -> T.Tuple[LatencyStats, Window]:
    """One latency repeat over an open connection."""
    samples = samples if samples is not None else LatencySamples()

    def rpc(offset_ns: int, measured: bool) -> None:
        response = conn.call(MsgType.ECHO_REQ, payload, cfg.mode)
        _check_echo(payload, response.buffers)
        if measured:
            samples.offsets_ms.append(offset_ns / 1e6)
            samples.rtt_us.append(response.elapsed_ns / 1e3)

    window = _run_window(cfg.warmup_secs, cfg.duration_secs, rpc, session)
    if not samples.rtt_us:
        raise RunFailure("No RPC completed inside the measurement window")
    return compute_stats(samples.rtt_us), window


def measure_bandwidth(
    cfg: BenchConfig,
    conn: Connection,
    payload: Payload,
    session: T.Optional[MonitorSession] = None,
) -> T.Tuple[BandwidthResult, Window]:
    """One bandwidth repeat: serial PUT/ACK over an open connection."""
    state = {"count": 0, "tx_start": 0}
    content = payload.total_bytes

    def rpc(_offset_ns: int, measured: bool) -> None:
        if measured and state["count"] == 0:
            state["tx_start"] = conn.transport.tx_bytes
        response = conn.call(MsgType.PUT_REQ, payload, cfg.mode)
        if response.buffers:
            raise IntegrityError("ACK carried a non-empty body")
        if measured:
            state["count"] += 1

    window = _run_window(cfg.warmup_secs, cfg.duration_secs, rpc, session)
    rpc_count = state["count"]
    if rpc_count == 0 or window.first_measured_ms is None or window.last_measured_end_ms is None:
        raise RunFailure("No RPC completed inside the measurement window")
    measured_secs = (window.last_measured_end_ms - window.first_measured_ms) / 1e3
    content_bytes = rpc_count * content
    return (
        BandwidthResult(
            rpc_count=rpc_count,
            content_bytes=content_bytes,
            measured_secs=measured_secs,
            mbytes_per_sec=content_bytes / measured_secs / MBYTE,
            wire_tx_bytes=conn.transport.tx_bytes - state["tx_start"],
        ),
        window,
    )


def measure_throughput_worker(
    cfg: BenchConfig,
    connections: T.Sequence[Connection],
    payload: Payload,
    worker_index: int,
    expected_pull_bytes: int = 0,
    session: T.Optional[MonitorSession] = None,
) -> T.Tuple[WorkerThroughput, Window]:
    """One worker's round-robin loop over every PS connection."""
    counts = [0] * len(connections)
    cursor = {"next": 0}
    push = cfg.direction == Direction.PUSH

    def rpc(_offset_ns: int, measured: bool) -> None:
        index = cursor["next"]
        cursor["next"] = (index + 1) % len(connections)
        if push:
            connections[index].call(MsgType.PUT_REQ, payload, cfg.mode)
        else:
            response = connections[index].call(MsgType.GET_REQ, None, cfg.mode)
            if expected_pull_bytes and response.content_bytes != expected_pull_bytes:
                raise IntegrityError(
                    f"GET_RESP carried {response.content_bytes} bytes, "
                    f"expected {expected_pull_bytes}"
                )
        if measured:
            counts[index] += 1

    window = _run_window(cfg.warmup_secs, cfg.duration_secs, rpc, session)
    return WorkerThroughput(worker_index, counts, cfg.duration_secs), window


def merge_throughput(
    workers: T.Sequence[WorkerThroughput], duration_secs: float
) -> ThroughputResult:
    ordered = sorted(workers, key=lambda w: w.worker_index)
    per_worker = [w.rpc_count for w in ordered]
    return ThroughputResult(
        per_worker_counts=per_worker,
        per_ps_counts=[list(w.ps_counts) for w in ordered],
        duration_secs=duration_secs,
        aggregate_rpcs_per_sec=sum(per_worker) / duration_secs,
    )


def _connect_all(
    endpoints: T.Sequence[Endpoint], capture: bool, counters: T.Optional[NetCounters]
) -> T.List[Connection]:
    connections: T.List[Connection] = []
    try:
        for endpoint in endpoints:
            connections.append(
                connect(
                    endpoint,
                    attempts=WORKER_CONNECT_ATTEMPTS,
                    capture=capture,
                    counters=counters,
                )
            )
    except ConnectError as exc:
        for conn in connections:
            conn.close()
        raise StartupError(f"Parameter server unreachable: {exc}") from exc
    return connections


@dataclass
class WorkerRun:
    """Everything one worker produced: per-repeat outcomes plus context."""

    role: str
    worker_index: int
    benchmark: Benchmark
    config: T.Dict[str, T.Any]
    spec: PayloadSpec
    repeats: T.List[RepeatOutcome] = field(default_factory=list)
    captured_digests: T.List[str] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "role": self.role,
            "worker_index": self.worker_index,
            "benchmark": self.benchmark.value,
            "config": self.config,
            "spec": self.spec.to_dict(),
            "repeats": [r.to_dict() for r in self.repeats],
            "captured_digests": list(self.captured_digests),
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }

    @staticmethod
    def from_dict(raw: T.Mapping[str, T.Any]) -> "WorkerRun":
        benchmark = Benchmark(raw["benchmark"])
        repeats = []
        for item in raw["repeats"]:
            result = item.get("result")
            window = item.get("window")
            resources = item.get("resources")
            repeats.append(
                RepeatOutcome(
                    repeat=int(item["repeat"]),
                    result=result_from_dict(benchmark, result) if result else None,
                    error=item.get("error"),
                    window=Window.from_dict(window) if window else None,
                    resources=ResourceSeries.from_dict(resources) if resources else None,
                )
            )
        return WorkerRun(
            role=raw["role"],
            worker_index=int(raw["worker_index"]),
            benchmark=benchmark,
            config=dict(raw["config"]),
            spec=PayloadSpec.from_dict(raw["spec"]),
            repeats=repeats,
            captured_digests=list(raw.get("captured_digests", [])),
            started_at=raw.get("started_at", ""),
            finished_at=raw.get("finished_at", ""),
        )


# pylint: disable=too-many-locals
def run_worker(
    cfg: BenchConfig,
    worker_index: int = 0,
    counters: T.Optional[NetCounters] = None,
    monitor: bool = True,
) -> WorkerRun:
    """Run every repeat of ``cfg.benchmark`` as worker ``worker_index``."""
    spec = cfg.payload_spec()
    payload = materialize(spec)
    endpoints = cfg.endpoints[:1] if cfg.benchmark != Benchmark.THROUGHPUT else cfg.endpoints
    run = WorkerRun(
        role=f"worker-{worker_index}",
        worker_index=worker_index,
        benchmark=cfg.benchmark,
        config=cfg.to_dict(),
        spec=spec,
        started_at=utc_now(),
    )
    connections = _connect_all(endpoints, cfg.capture, counters)
    log.print_normal(
        f"{run.role}: {cfg.benchmark.value} against {', '.join(map(str, endpoints))} "
        f"({spec.scheme.value}, {len(spec.buffers)} buffers, {spec.total_bytes} bytes, "
        f"{cfg.mode.label})"
    )
    try:
        for repeat in range(cfg.repeats):
            session = (
                start_monitor(
                    cfg.monitor_interval_ms,
                    role=run.role,
                    warmup_secs=cfg.warmup_secs,
                    counters=counters,
                )
                if monitor
                else None
            )
            outcome = RepeatOutcome(repeat=repeat)
            abort = False
            try:
                if not connections:
                    connections = _connect_all(endpoints, cfg.capture, counters)
                if cfg.benchmark == Benchmark.LATENCY:
                    outcome.result, outcome.window = measure_latency(
                        cfg, connections[0], payload, session=session
                    )
                elif cfg.benchmark == Benchmark.BANDWIDTH:
                    outcome.result, outcome.window = measure_bandwidth(
                        cfg, connections[0], payload, session=session
                    )
                else:
                    outcome.result, outcome.window = measure_throughput_worker(
                        cfg, connections, payload, worker_index, spec.total_bytes, session
                    )
            except BenchError as exc:
                abort = isinstance(exc, (IntegrityError, StartupError))
                outcome.error = f"{type(exc).__name__}: {exc}"
                log.print_fail(f"{run.role} repeat {repeat} failed: {outcome.error}")
                _close_all(run, connections)
                connections = []
            finally:
                if session is not None:
                    outcome.resources = session.stop()
            run.repeats.append(outcome)
            if outcome.ok:
                log.print_ok_arrow(f"{run.role} repeat {repeat}: {outcome.result}")
            elif abort:
                run.repeats.extend(
                    RepeatOutcome(repeat=skipped, error=f"not run after repeat {repeat} failed")
                    for skipped in range(repeat + 1, cfg.repeats)
                )
                break
    finally:
        _close_all(run, connections)
        run.finished_at = utc_now()
    return run


def _close_all(run: WorkerRun, connections: T.Sequence[Connection]) -> None:
    for conn in connections:
        run.captured_digests.extend(
            d for d in conn.captured_digests if d not in run.captured_digests
        )
        conn.close()


def run_latency(
    cfg: BenchConfig, counters: T.Optional[NetCounters] = None
) -> T.List[RepeatOutcome]:
    return run_worker(replace(cfg, benchmark=Benchmark.LATENCY), 0, counters=counters).repeats


def run_bandwidth(
    cfg: BenchConfig, counters: T.Optional[NetCounters] = None
) -> T.List[RepeatOutcome]:
    return run_worker(replace(cfg, benchmark=Benchmark.BANDWIDTH), 0, counters=counters).repeats


def run_throughput_worker(
    cfg: BenchConfig, worker_index: int, counters: T.Optional[NetCounters] = None
) -> T.List[RepeatOutcome]:
    """One worker's share of a throughput run; each result is a WorkerThroughput."""
    cfg = replace(cfg, benchmark=Benchmark.THROUGHPUT)
    return run_worker(cfg, worker_index, counters=counters).repeats


def merge_worker_runs(runs: T.Sequence[WorkerRun], duration_secs: float) -> T.List[RepeatOutcome]:
    """Per-repeat ThroughputResults; a repeat fails if any worker's repeat failed."""
    if not runs:
        return []
    merged: T.List[RepeatOutcome] = []
    for repeat in range(max(len(r.repeats) for r in runs)):
        parts: T.List[WorkerThroughput] = []
        errors: T.List[str] = []
        for run in runs:
            outcome = run.repeats[repeat] if repeat < len(run.repeats) else None
            if outcome is None:
                errors.append(f"{run.role}: repeat did not run")
            elif not outcome.ok or not isinstance(outcome.result, WorkerThroughput):
                errors.append(f"{run.role}: {outcome.error}")
            else:
                parts.append(outcome.result)
        if errors:
            merged.append(RepeatOutcome(repeat=repeat, error="; ".join(errors)))
        else:
            result = merge_throughput(parts, duration_secs)
            merged.append(RepeatOutcome(repeat=repeat, result=result))
    return merged


def run_throughput(
    cfg: BenchConfig, counters: T.Optional[NetCounters] = None, monitor: bool = False
) -> T.List[RepeatOutcome]:
    """In-process throughput: one thread per worker, merged per repeat."""
    runs: T.List[T.Optional[WorkerRun]] = [None] * cfg.num_workers
    failures: T.List[BaseException] = []

    def work(index: int) -> None:
        try:
            runs[index] = run_worker(cfg, index, counters=counters, monitor=monitor)
        except BenchError as exc:
            failures.append(exc)

    threads = [
        threading.Thread(target=work, args=(i,), name=f"worker-{i}", daemon=True)
        for i in range(cfg.num_workers)
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    if failures:
        raise StartupError(f"Throughput workers failed to start: {failures[0]}") from failures[0]
    return merge_worker_runs([r for r in runs if r is not None], cfg.duration_secs)


def run_benchmark(
    cfg: BenchConfig, counters: T.Optional[NetCounters] = None
) -> T.Tuple[T.List[RepeatOutcome], AggregateResult]:
    """In-process run of ``cfg.benchmark`` against already-running parameter servers."""
    if cfg.benchmark == Benchmark.LATENCY:
        outcomes = run_latency(cfg, counters)
    elif cfg.benchmark == Benchmark.BANDWIDTH:
        outcomes = run_bandwidth(cfg, counters)
    else:
        outcomes = run_throughput(cfg, counters)
    return outcomes, aggregate_runs(outcomes)
