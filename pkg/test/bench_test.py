#!/usr/bin/env python3
"""
Tests for statistics, repeat aggregation and the three benchmark loops.
"""

import typing as T
import unittest
from unittest.mock import patch

import numpy as np

from ps_rpc_bench.bench import (
    MBYTE,
    BandwidthResult,
    LatencySamples,
    LatencyStats,
    RepeatOutcome,
    ThroughputResult,
    WorkerRun,
    WorkerThroughput,
    _check_echo,  # pylint: disable=protected-access
    aggregate_runs,
    compute_stats,
    measure_bandwidth,
    measure_latency,
    merge_throughput,
    merge_worker_runs,
    run_benchmark,
    run_latency,
    run_throughput,
    run_throughput_worker,
    run_worker,
)
from ps_rpc_bench.config import Benchmark, Direction
from ps_rpc_bench.errors import IntegrityError, RunFailure, StartupError, StatsError
from ps_rpc_bench.rpc import Endpoint, connect
from ps_rpc_bench.transport import NetCounters
from ps_rpc_bench.wire import HEADER_SIZE, Mode, framing_overhead
from ps_rpc_bench.workload import BufferCategory, materialize
from test.server_test_base import LOOPBACK, ServerTestBase, small_spec, unused_port


def latency_outcome(repeat: int, mean: float) -> RepeatOutcome:
    stats = LatencyStats(10, mean, mean - 1, mean + 1, mean, mean, mean)
    return RepeatOutcome(repeat=repeat, result=stats)


class TestComputeStats(unittest.TestCase):
    def test_five_samples(self) -> None:
        stats = compute_stats([5.0, 1.0, 4.0, 2.0, 3.0])
        self.assertEqual(stats.count, 5)
        self.assertEqual(stats.mean_us, 3.0)
        self.assertEqual((stats.min_us, stats.max_us), (1.0, 5.0))
        self.assertEqual(stats.p50_us, 3.0)
        self.assertEqual(stats.p99_us, 5.0)

    def test_single_sample(self) -> None:
        stats = compute_stats([7.0])
        self.assertEqual(
            (stats.mean_us, stats.min_us, stats.max_us, stats.p50_us, stats.p99_us),
            (7.0, 7.0, 7.0, 7.0, 7.0),
        )

    def test_hundred_samples(self) -> None:
        stats = compute_stats([float(v) for v in range(100, 0, -1)])
        self.assertEqual(stats.p50_us, 50.0)
        self.assertEqual(stats.p90_us, 90.0)
        self.assertEqual(stats.p99_us, 99.0)
        self.assertEqual(stats.mean_us, 50.5)

    def test_percentiles_ordered(self) -> None:
        stats = compute_stats([float((v * 37) % 101) for v in range(1, 400)])
        self.assertLessEqual(stats.min_us, stats.p50_us)
        self.assertLessEqual(stats.p50_us, stats.p90_us)
        self.assertLessEqual(stats.p90_us, stats.p99_us)
        self.assertLessEqual(stats.p99_us, stats.max_us)

    def test_empty_raises(self) -> None:
        with self.assertRaises(StatsError):
            compute_stats([])


class TestAggregateRuns(unittest.TestCase):
    def test_mean_over_repeats(self) -> None:
        means = [10.0, 12.0, 11.0, 9.0, 13.0]
        aggregate = aggregate_runs([latency_outcome(i, m) for i, m in enumerate(means)])
        self.assertEqual(aggregate.averaged["mean_us"], 11.0)
        self.assertEqual(aggregate.averaged["max_us"], 12.0)
        self.assertEqual((aggregate.successful, aggregate.failed), (5, 0))

    def test_failed_repeats_excluded(self) -> None:
        outcomes = [
            latency_outcome(0, 10.0),
            RepeatOutcome(repeat=1, error="CallError: reset"),
            latency_outcome(2, 20.0),
        ]
        aggregate = aggregate_runs(outcomes)
        self.assertEqual(aggregate.averaged["mean_us"], 15.0)
        self.assertEqual((aggregate.successful, aggregate.failed), (2, 1))
        self.assertEqual(aggregate.errors, ["repeat 1: CallError: reset"])

    def test_all_failed(self) -> None:
        with self.assertRaises(RunFailure):
            aggregate_runs([RepeatOutcome(repeat=0, error="boom")])

    def test_bandwidth_metrics(self) -> None:
        outcomes = [
            RepeatOutcome(0, BandwidthResult(10, 1000, 1.0, 100.0)),
            RepeatOutcome(1, BandwidthResult(30, 3000, 1.0, 300.0)),
        ]
        averaged = aggregate_runs(outcomes).averaged
        self.assertEqual(averaged["mbytes_per_sec"], 200.0)
        self.assertEqual(averaged["rpc_count"], 20.0)


class TestMerge(unittest.TestCase):
    def test_merge_throughput(self) -> None:
        result = merge_throughput(
            [WorkerThroughput(1, [5, 4], 2.0), WorkerThroughput(0, [3, 3], 2.0)], 2.0
        )
        self.assertEqual(result.per_worker_counts, [6, 9])
        self.assertEqual(result.per_ps_counts, [[3, 3], [5, 4]])
        self.assertEqual(result.aggregate_rpcs_per_sec, 7.5)

    def _run(self, index: int, outcomes: T.List[RepeatOutcome]) -> WorkerRun:
        return WorkerRun(
            role=f"worker-{index}",
            worker_index=index,
            benchmark=Benchmark.THROUGHPUT,
            config={},
            spec=small_spec(),
            repeats=outcomes,
        )

    def test_merge_worker_runs_fails_repeat_on_any_worker(self) -> None:
        runs = [
            self._run(
                0,
                [
                    RepeatOutcome(0, WorkerThroughput(0, [4], 1.0)),
                    RepeatOutcome(1, WorkerThroughput(0, [4], 1.0)),
                ],
            ),
            self._run(
                1,
                [
                    RepeatOutcome(0, WorkerThroughput(1, [6], 1.0)),
                    RepeatOutcome(1, error="CallError: reset"),
                ],
            ),
        ]
        merged = merge_worker_runs(runs, 1.0)
        self.assertEqual(len(merged), 2)
        self.assertTrue(merged[0].ok)
        assert isinstance(merged[0].result, ThroughputResult)
        self.assertEqual(merged[0].result.aggregate_rpcs_per_sec, 10.0)
        self.assertFalse(merged[1].ok)
        self.assertIn("worker-1", merged[1].error or "")

    def test_missing_repeat_fails(self) -> None:
        runs = [
            self._run(0, [RepeatOutcome(0, WorkerThroughput(0, [4], 1.0))]),
            self._run(1, []),
        ]
        merged = merge_worker_runs(runs, 1.0)
        self.assertFalse(merged[0].ok)
        self.assertIn("did not run", merged[0].error or "")


class TestCheckEcho(unittest.TestCase):
    def test_mismatch_raises(self) -> None:
        payload = materialize(small_spec())
        altered = [memoryview(b) for b in payload.buffers]
        altered[-1] = memoryview(b"x" * len(altered[-1]))
        with self.assertRaises(IntegrityError):
            _check_echo(payload, altered)
        with self.assertRaises(IntegrityError):
            _check_echo(payload, altered[:-1])
        _check_echo(payload, [memoryview(b) for b in payload.buffers])


class TestLatency(ServerTestBase):
    def test_samples_fall_in_measured_window(self) -> None:
        cfg = self.bench_config()
        payload = materialize(cfg.payload_spec())
        conn = connect(cfg.endpoints[0], counters=NetCounters())
        samples = LatencySamples()
        try:
            stats, window = measure_latency(cfg, conn, payload, samples)
        finally:
            conn.close()
        self.assertGreater(stats.count, 0)
        self.assertEqual(stats.count, len(samples.rtt_us))
        assert window.first_measured_ms is not None
        self.assertGreaterEqual(window.first_measured_ms, window.warmup_end_ms)
        self.assertTrue(all(o >= window.warmup_end_ms for o in samples.offsets_ms))
        self.assertTrue(all(o < window.deadline_ms for o in samples.offsets_ms))
        self.assertGreaterEqual(window.wall_secs, cfg.warmup_secs + cfg.duration_secs)

    def test_repeats_aggregate(self) -> None:
        cfg = self.bench_config(repeats=2, warmup_secs=0.0, duration_secs=0.2)
        outcomes = run_latency(cfg)
        self.assertEqual([o.repeat for o in outcomes], [0, 1])
        self.assertTrue(all(o.ok for o in outcomes))
        aggregate = aggregate_runs(outcomes)
        means = [o.result.mean_us for o in outcomes if isinstance(o.result, LatencyStats)]
        self.assertAlmostEqual(aggregate.averaged["mean_us"], sum(means) / 2)

    def test_serialized_mode(self) -> None:
        cfg = self.bench_config(mode=Mode.SERIALIZED, warmup_secs=0.0, duration_secs=0.2)
        outcomes, aggregate = run_benchmark(cfg)
        self.assertTrue(outcomes[0].ok)
        self.assertGreater(aggregate.averaged["count"], 0)

    def test_five_repeats_average(self) -> None:
        cfg = self.bench_config(repeats=5, warmup_secs=0.02, duration_secs=0.1)
        outcomes = run_latency(cfg)
        self.assertEqual([o.repeat for o in outcomes], [0, 1, 2, 3, 4])
        aggregate = aggregate_runs(outcomes)
        self.assertEqual((aggregate.successful, aggregate.failed), (5, 0))
        means = [o.result.mean_us for o in outcomes if isinstance(o.result, LatencyStats)]
        self.assertEqual(len(means), 5)
        self.assertAlmostEqual(aggregate.averaged["mean_us"], sum(means) / 5)

    def test_same_seed_same_payload(self) -> None:
        cfg = self.bench_config(capture=True, warmup_secs=0.0, duration_secs=0.1)
        first = run_worker(cfg, 0, counters=NetCounters(), monitor=False)
        second = run_worker(cfg, 0, counters=NetCounters(), monitor=False)
        self.assertEqual(first.spec, second.spec)
        self.assertEqual(len(first.captured_digests), 1)
        self.assertEqual(first.captured_digests, second.captured_digests)

        reseeded = self.bench_config(capture=True, warmup_secs=0.0, duration_secs=0.1, seed=8)
        other = run_worker(reseeded, 0, counters=NetCounters(), monitor=False)
        self.assertNotEqual(other.captured_digests, first.captured_digests)


class TestLatencyTrends(ServerTestBase):
    """Short-window loopback runs of the headline latency comparisons."""

    def _median_latency_us(self, **overrides: T.Any) -> float:
        params: T.Dict[str, T.Any] = {
            "categories": (BufferCategory.LARGE,),
            "iovec_count": 4,
            "repeats": 5,
            "warmup_secs": 0.05,
            "duration_secs": 0.25,
        }
        params.update(overrides)
        outcomes = run_latency(self.bench_config(**params), counters=NetCounters())
        means = [o.result.mean_us for o in outcomes if isinstance(o.result, LatencyStats)]
        self.assertEqual(len(means), 5)
        return float(np.median(means))

    def test_serialized_is_not_faster(self) -> None:
        plain = self._median_latency_us(mode=Mode.NON_SERIALIZED)
        serialized = self._median_latency_us(mode=Mode.SERIALIZED)
        self.assertGreaterEqual(serialized, plain)

    def test_latency_grows_with_large_buffer_count(self) -> None:
        two = self._median_latency_us(iovec_count=2)
        ten = self._median_latency_us(iovec_count=10)
        self.assertGreater(ten, two)


class TestBandwidth(ServerTestBase):
    def test_accounting(self) -> None:
        for mode in Mode:
            cfg = self.bench_config(Benchmark.BANDWIDTH, mode=mode, duration_secs=0.3)
            payload = materialize(cfg.payload_spec())
            conn = connect(cfg.endpoints[0], counters=NetCounters())
            try:
                result, window = measure_bandwidth(cfg, conn, payload)
            finally:
                conn.close()
            self.assertGreater(result.rpc_count, 0)
            self.assertEqual(result.content_bytes, result.rpc_count * payload.total_bytes)
            self.assertAlmostEqual(
                result.mbytes_per_sec, result.content_bytes / result.measured_secs / MBYTE
            )
            overhead = framing_overhead([len(b) for b in payload.buffers], mode)
            self.assertEqual(
                result.wire_tx_bytes, result.content_bytes + result.rpc_count * overhead
            )
            self.assertLessEqual(result.measured_secs, window.wall_secs)

    def test_monitor_counts_measured_traffic(self) -> None:
        for mode in Mode:
            cfg = self.bench_config(Benchmark.BANDWIDTH, mode=mode, duration_secs=0.3)
            run = run_worker(cfg, 0, counters=NetCounters(), monitor=True)
            outcome = run.repeats[0]
            result, series = outcome.result, outcome.resources
            assert isinstance(result, BandwidthResult)
            assert series is not None
            lengths = [buf.size for buf in run.spec.buffers]
            overhead = framing_overhead(lengths, mode)
            self.assertEqual(
                series.measure_net_tx_bytes, result.content_bytes + result.rpc_count * overhead
            )
            self.assertEqual(series.measure_net_tx_bytes, result.wire_tx_bytes)
            self.assertEqual(series.measure_net_rx_bytes, result.rpc_count * HEADER_SIZE)


class TestThroughput(ServerTestBase):
    num_servers = 2

    def test_two_ps_three_workers(self) -> None:
        cfg = self.bench_config(Benchmark.THROUGHPUT, num_workers=3, duration_secs=0.4)
        outcomes, aggregate = run_benchmark(cfg)
        self.assertEqual(len(outcomes), 1)
        result = outcomes[0].result
        assert isinstance(result, ThroughputResult)
        self.assertEqual(len(result.per_worker_counts), 3)
        self.assertAlmostEqual(
            result.aggregate_rpcs_per_sec, sum(result.per_worker_counts) / cfg.duration_secs
        )
        for counts in result.per_ps_counts:
            self.assertEqual(len(counts), 2)
            self.assertLessEqual(max(counts) - min(counts), 1)
        self.assertEqual(aggregate.successful, 1)

    def test_pull_direction(self) -> None:
        cfg = self.bench_config(
            Benchmark.THROUGHPUT, num_workers=2, direction=Direction.PULL, duration_secs=0.3
        )
        outcomes = run_throughput(cfg)
        self.assertTrue(outcomes[0].ok)
        assert isinstance(outcomes[0].result, ThroughputResult)
        self.assertGreater(sum(outcomes[0].result.per_worker_counts), 0)

    def test_single_worker_share(self) -> None:
        cfg = self.bench_config(Benchmark.THROUGHPUT, num_workers=3, duration_secs=0.2)
        outcomes = run_throughput_worker(cfg, 2)
        result = outcomes[0].result
        assert isinstance(result, WorkerThroughput)
        self.assertEqual(result.worker_index, 2)
        self.assertEqual(len(result.ps_counts), 2)
        self.assertAlmostEqual(result.rpcs_per_sec, result.rpc_count / cfg.duration_secs)


class TestWorkerRun(ServerTestBase):
    def test_dict_round_trip(self) -> None:
        cfg = self.bench_config(capture=True, warmup_secs=0.05, duration_secs=0.1)
        run = run_worker(cfg, 0, monitor=True)
        self.assertEqual(run.role, "worker-0")
        self.assertEqual(len(run.captured_digests), 1)
        self.assertIsNotNone(run.repeats[0].resources)
        raw = run.to_dict()
        self.assertEqual(WorkerRun.from_dict(raw).to_dict(), raw)

    def test_unreachable_ps_is_startup_error(self) -> None:
        cfg = self.bench_config(ps_endpoints=(Endpoint(LOOPBACK, unused_port()),))
        with self.assertRaises(StartupError):
            run_worker(cfg, 0, monitor=False)


class TestServerLostMidRun(ServerTestBase):
    """The class's server is stopped as the second repeat begins."""

    def test_completed_repeats_are_kept(self) -> None:
        cfg = self.bench_config(repeats=4, warmup_secs=0.0, duration_secs=0.1)
        server = self.servers[0]
        calls: T.List[int] = []

        def stop_before_second_repeat(*args: T.Any, **kwargs: T.Any) -> T.Any:
            calls.append(len(calls))
            if len(calls) == 2:
                server.stop()
            return measure_latency(*args, **kwargs)

        with patch("ps_rpc_bench.bench.measure_latency", side_effect=stop_before_second_repeat):
            run = run_worker(cfg, 0, counters=NetCounters(), monitor=False)

        self.assertEqual(len(calls), 2)
        self.assertEqual([o.repeat for o in run.repeats], [0, 1, 2, 3])
        self.assertEqual([o.ok for o in run.repeats], [True, False, False, False])
        self.assertIn("CallError", run.repeats[1].error or "")
        self.assertIn("StartupError", run.repeats[2].error or "")
        self.assertIn("not run", run.repeats[3].error or "")
        aggregate = aggregate_runs(run.repeats)
        self.assertEqual((aggregate.successful, aggregate.failed), (1, 3))
        self.assertTrue(run.finished_at)


if __name__ == "__main__":
    unittest.main()
