#!/usr/bin/env python3
"""
Tests for the per-process resource monitor.
"""

import time
import unittest
from unittest.mock import MagicMock

import psutil

from ps_rpc_bench.errors import ConfigError
from ps_rpc_bench.monitor import (
    MonitorSession,
    Phase,
    ResourceSample,
    ResourceSeries,
    start_monitor,
    stop_monitor,
)
from ps_rpc_bench.transport import NetCounters


class TestMonitorSession(unittest.TestCase):
    def test_interval_too_small(self) -> None:
        with self.assertRaises(ConfigError):
            MonitorSession(5)

    def test_samples_within_window(self) -> None:
        counters = NetCounters()
        started = time.monotonic_ns()
        session = start_monitor(20, role="worker-0", counters=counters)
        counters.add_tx(1000)
        time.sleep(0.2)
        series = stop_monitor(session)
        elapsed_ms = (time.monotonic_ns() - started) / 1e6

        self.assertEqual(series.role, "worker-0")
        self.assertEqual(series.interval_ms, 20)
        self.assertGreaterEqual(len(series.samples), 3)
        offsets = [s.t_ms for s in series.samples]
        self.assertEqual(offsets, sorted(offsets))
        self.assertTrue(all(0 <= t <= elapsed_ms for t in offsets))
        self.assertEqual(series.samples[-1].net_tx_bytes, 1000)
        for sample in series.samples:
            if sample.rss_bytes is not None:
                self.assertGreater(sample.rss_bytes, 0)
            if sample.cpu_percent is not None:
                self.assertGreaterEqual(sample.cpu_percent, 0.0)

    def test_phases_follow_warmup(self) -> None:
        session = start_monitor(10, warmup_secs=0.1, counters=NetCounters())
        time.sleep(0.25)
        series = session.stop()
        for sample in series.samples:
            expected = Phase.WARMUP if sample.t_ms < 100.0 else Phase.MEASURE
            self.assertEqual(sample.phase, expected)
        self.assertIn(Phase.MEASURE, {s.phase for s in series.samples})

    def test_stop_relabels_phases(self) -> None:
        session = start_monitor(10, counters=NetCounters())
        time.sleep(0.1)
        series = session.stop(warmup_secs=10.0)
        self.assertTrue(all(s.phase == Phase.WARMUP for s in series.samples))

    def test_bounded_buffer_counts_drops(self) -> None:
        session = MonitorSession(10, counters=NetCounters(), max_samples=3)
        for step in range(5):
            # pylint: disable=protected-access
            session._record(ResourceSample(float(step), None, None, 0, 0))
        series = session.stop()
        self.assertEqual([s.t_ms for s in series.samples], [2.0, 3.0, 4.0])
        self.assertEqual(series.dropped, 2)

    def test_process_errors_leave_gaps(self) -> None:
        process = MagicMock()
        process.cpu_times.side_effect = psutil.AccessDenied(pid=1)
        process.memory_info.side_effect = psutil.NoSuchProcess(pid=1)
        counters = NetCounters()
        session = start_monitor(10, process=process, counters=counters)
        counters.add_rx(64)
        time.sleep(0.1)
        series = session.stop()

        self.assertFalse(series.os_stats_available)
        self.assertGreater(len(series.samples), 0)
        self.assertTrue(all(s.cpu_percent is None for s in series.samples))
        self.assertTrue(all(s.rss_bytes is None for s in series.samples))
        self.assertEqual(series.samples[-1].net_rx_bytes, 64)
        self.assertFalse(ResourceSeries.from_dict(series.to_dict()).os_stats_available)

    def test_measure_marks_give_counter_deltas(self) -> None:
        counters = NetCounters()
        counters.add_tx(500)
        session = start_monitor(10, counters=counters)
        session.mark_measure_start()
        counters.add_tx(1200)
        counters.add_rx(48)
        session.mark_measure_end()
        counters.add_tx(99)
        series = session.stop()
        self.assertEqual((series.measure_net_tx_bytes, series.measure_net_rx_bytes), (1200, 48))

    def test_no_marks_no_deltas(self) -> None:
        series = start_monitor(10, counters=NetCounters()).stop()
        self.assertIsNone(series.measure_net_tx_bytes)
        self.assertIsNone(series.measure_net_rx_bytes)


class TestResourceSeries(unittest.TestCase):
    def test_dict_round_trip(self) -> None:
        series = ResourceSeries(
            role="ps-0",
            interval_ms=100,
            samples=[
                ResourceSample(50.0, None, 1 << 20, 0, 0, Phase.WARMUP),
                ResourceSample(150.0, 12.5, 1 << 21, 4096, 24, Phase.MEASURE),
            ],
            dropped=1,
            measure_net_tx_bytes=4096,
            measure_net_rx_bytes=24,
        )
        self.assertEqual(ResourceSeries.from_dict(series.to_dict()), series)


if __name__ == "__main__":
    unittest.main()
