"""
Per-process resource sampling during a benchmark run.

CPU and resident memory come from psutil; network bytes come from the
transport's own counters, so they count exactly the benchmark's traffic.
"""

import collections
import enum
import threading
import time
import typing as T
from dataclasses import dataclass, field

import psutil
from ryutils import log

from ps_rpc_bench.errors import ConfigError
from ps_rpc_bench.transport import NET_COUNTERS, NetCounters, NetSnapshot

MIN_INTERVAL_MS = 10
DEFAULT_INTERVAL_MS = 100
DEFAULT_MAX_SAMPLES = 100_000


class Phase(str, enum.Enum):
    WARMUP = "warmup"
    MEASURE = "measure"


@dataclass
class ResourceSample:
    t_ms: float
    cpu_percent: T.Optional[float]
    rss_bytes: T.Optional[int]
    net_tx_bytes: int
    net_rx_bytes: int
    phase: Phase = Phase.MEASURE

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "t_ms": self.t_ms,
            "cpu_percent": self.cpu_percent,
            "rss_bytes": self.rss_bytes,
            "net_tx_bytes": self.net_tx_bytes,
            "net_rx_bytes": self.net_rx_bytes,
            "phase": self.phase.value,
        }


@dataclass
class ResourceSeries:
    role: str
    interval_ms: int
    samples: T.List[ResourceSample] = field(default_factory=list)
    dropped: int = 0
    os_stats_available: bool = True
    # counter deltas between the first measured RPC and the close of the window
    measure_net_tx_bytes: T.Optional[int] = None
    measure_net_rx_bytes: T.Optional[int] = None

    def to_dict(self) -> T.Dict[str, T.Any]:
        return {
            "role": self.role,
            "interval_ms": self.interval_ms,
            "dropped": self.dropped,
            "os_stats_available": self.os_stats_available,
            "measure_net_tx_bytes": self.measure_net_tx_bytes,
            "measure_net_rx_bytes": self.measure_net_rx_bytes,
            "samples": [s.to_dict() for s in self.samples],
        }

    @staticmethod
    def from_dict(raw: T.Mapping[str, T.Any]) -> "ResourceSeries":
        return ResourceSeries(
            role=raw["role"],
            interval_ms=int(raw["interval_ms"]),
            samples=[
                ResourceSample(
                    t_ms=float(s["t_ms"]),
                    cpu_percent=s.get("cpu_percent"),
                    rss_bytes=s.get("rss_bytes"),
                    net_tx_bytes=int(s["net_tx_bytes"]),
                    net_rx_bytes=int(s["net_rx_bytes"]),
                    phase=Phase(s.get("phase", Phase.MEASURE.value)),
                )
                for s in raw.get("samples", [])
            ],
            dropped=int(raw.get("dropped", 0)),
            os_stats_available=bool(raw.get("os_stats_available", True)),
            measure_net_tx_bytes=raw.get("measure_net_tx_bytes"),
            measure_net_rx_bytes=raw.get("measure_net_rx_bytes"),
        )


# pylint: disable=too-many-instance-attributes
class MonitorSession:
    def __init__(
        self,
        interval_ms: int,
        process: T.Optional[psutil.Process] = None,
        role: str = "worker-0",
        warmup_secs: float = 0.0,
        counters: T.Optional[NetCounters] = None,
        t0_ns: T.Optional[int] = None,
        max_samples: int = DEFAULT_MAX_SAMPLES,
    ) -> None:
        if interval_ms < MIN_INTERVAL_MS:
            raise ConfigError(
                f"Monitor interval must be >= {MIN_INTERVAL_MS} ms, got {interval_ms}"
            )
        self.interval_ms = interval_ms
        self.role = role
        self.warmup_ms = warmup_secs * 1000.0
        self.counters = counters if counters is not None else NET_COUNTERS
        self.t0_ns = t0_ns if t0_ns is not None else time.monotonic_ns()
        self._samples: T.Deque[ResourceSample] = collections.deque(maxlen=max_samples)
        self._dropped = 0
        self._stop_flag = threading.Event()
        self._thread: T.Optional[threading.Thread] = None
        self._os_stats_available = True
        self._process: T.Optional[psutil.Process] = None
        try:
            self._process = process if process is not None else psutil.Process()
        except psutil.Error as exc:
            self._disable_os_stats(exc)
        self._last_cpu: T.Optional[float] = None
        self._last_wall_ns = self.t0_ns
        self._measure_start: T.Optional[NetSnapshot] = None
        self._measure_end: T.Optional[NetSnapshot] = None

    def _disable_os_stats(self, exc: Exception) -> None:
        if self._os_stats_available:
            log.print_warn(f"Process statistics unavailable for {self.role}: {exc}")
        self._os_stats_available = False
        self._process = None

    def _process_cpu_secs(self) -> T.Optional[float]:
        if self._process is None:
            return None
        try:
            times = self._process.cpu_times()
            return float(times.user + times.system)
        except (psutil.Error, OSError) as exc:
            self._disable_os_stats(exc)
            return None

    def _rss(self) -> T.Optional[int]:
        if self._process is None:
            return None
        try:
            return int(self._process.memory_info().rss)
        except (psutil.Error, OSError) as exc:
            self._disable_os_stats(exc)
            return None

    def _take_sample(self) -> ResourceSample:
        now_ns = time.monotonic_ns()
        cpu_secs = self._process_cpu_secs()
        cpu_percent: T.Optional[float] = None
        wall_secs = (now_ns - self._last_wall_ns) / 1e9
        if cpu_secs is not None and self._last_cpu is not None and wall_secs > 0:
            cpu_percent = max(0.0, (cpu_secs - self._last_cpu) / wall_secs * 100.0)
        self._last_cpu = cpu_secs
        self._last_wall_ns = now_ns
        net = self.counters.snapshot()
        t_ms = (now_ns - self.t0_ns) / 1e6
        return ResourceSample(
            t_ms=t_ms,
            cpu_percent=cpu_percent,
            rss_bytes=self._rss(),
            net_tx_bytes=net.tx_bytes,
            net_rx_bytes=net.rx_bytes,
            phase=Phase.WARMUP if t_ms < self.warmup_ms else Phase.MEASURE,
        )

    def _record(self, sample: ResourceSample) -> None:
        if self._samples.maxlen is not None and len(self._samples) == self._samples.maxlen:
            self._dropped += 1
        self._samples.append(sample)

    def _sample_loop(self) -> None:
        interval_ns = self.interval_ms * 1_000_000
        next_tick = self.t0_ns + interval_ns
        while True:
            delay = (next_tick - time.monotonic_ns()) / 1e9
            if self._stop_flag.wait(timeout=max(0.0, delay)):
                return
            self._record(self._take_sample())
            next_tick += interval_ns

    def start(self) -> "MonitorSession":
        if self._thread is None:
            self._last_cpu = self._process_cpu_secs()
            self._last_wall_ns = time.monotonic_ns()
            self._thread = threading.Thread(
                target=self._sample_loop, name=f"monitor-{self.role}", daemon=True
            )
            self._thread.start()
        return self

    def mark_measure_start(self) -> None:
        """Called just before the first measured RPC is issued."""
        self._measure_start = self.counters.snapshot()

    def mark_measure_end(self) -> None:
        """Called once the last measured RPC has completed."""
        self._measure_end = self.counters.snapshot()

    def stop(self, warmup_secs: T.Optional[float] = None) -> ResourceSeries:
        self._stop_flag.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)
            self._thread = None
        warmup_ms = self.warmup_ms if warmup_secs is None else warmup_secs * 1000.0
        samples = list(self._samples)
        for sample in samples:
            sample.phase = Phase.WARMUP if sample.t_ms < warmup_ms else Phase.MEASURE
        series = ResourceSeries(
            role=self.role,
            interval_ms=self.interval_ms,
            samples=samples,
            dropped=self._dropped,
            os_stats_available=self._os_stats_available,
        )
        if self._measure_start is not None and self._measure_end is not None:
            series.measure_net_tx_bytes = self._measure_end.tx_bytes - self._measure_start.tx_bytes
            series.measure_net_rx_bytes = self._measure_end.rx_bytes - self._measure_start.rx_bytes
        return series


def start_monitor(
    interval_ms: int = DEFAULT_INTERVAL_MS,
    process: T.Optional[psutil.Process] = None,
    role: str = "worker-0",
    warmup_secs: float = 0.0,
    counters: T.Optional[NetCounters] = None,
    t0_ns: T.Optional[int] = None,
) -> MonitorSession:
    return MonitorSession(
        interval_ms,
        process=process,
        role=role,
        warmup_secs=warmup_secs,
        counters=counters,
        t0_ns=t0_ns,
    ).start()


def stop_monitor(session: MonitorSession, warmup_secs: T.Optional[float] = None) -> ResourceSeries:
    return session.stop(warmup_secs)
