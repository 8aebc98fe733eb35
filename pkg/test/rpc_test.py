#!/usr/bin/env python3
"""
Tests for the parameter server and worker connections over loopback.
"""

import socket
import threading
import time
import typing as T
import unittest

from ps_rpc_bench.errors import ConfigError, ConnectError
from ps_rpc_bench.rpc import Endpoint, PsServer, ServerConfig, connect, serve
from ps_rpc_bench.transport import NetCounters
from ps_rpc_bench.wire import Mode, MsgType
from ps_rpc_bench.workload import content_digest, materialize
from test.server_test_base import LOOPBACK, ServerTestBase, small_spec, unused_port


class TestEndpoint(unittest.TestCase):
    def test_parse(self) -> None:
        self.assertEqual(Endpoint.parse("10.0.0.2:50003"), Endpoint("10.0.0.2", 50003))
        self.assertEqual(str(Endpoint("localhost", 50001)), "localhost:50001")

    def test_parse_errors(self) -> None:
        for text in ("localhost", ":50001", "host:abc", "host:70000"):
            with self.assertRaises(ConfigError, msg=text):
                Endpoint.parse(text)

    def test_consecutive_ports(self) -> None:
        endpoints = Endpoint.consecutive("localhost", 50001, 3)
        self.assertEqual([e.port for e in endpoints], [50001, 50002, 50003])


class TestPsServer(ServerTestBase):
    def setUp(self) -> None:
        self.conn = connect(self.endpoints()[0], counters=NetCounters())
        self.payload = materialize(small_spec(seed=11))

    def tearDown(self) -> None:
        self.conn.close()

    def test_bound_port_reported(self) -> None:
        self.assertNotEqual(self.endpoints()[0].port, 0)
        self.assertTrue(self.servers[0].running)

    def test_echo_round_trip_both_modes(self) -> None:
        for mode in Mode:
            result = self.conn.call(MsgType.ECHO_REQ, self.payload, mode)
            self.assertEqual([bytes(b) for b in result.buffers], list(self.payload.buffers))
            self.assertGreater(result.elapsed_ns, 0)

    def test_put_is_acknowledged(self) -> None:
        result = self.conn.call(MsgType.PUT_REQ, self.payload, Mode.SERIALIZED)
        self.assertEqual(result.buffers, [])

    def test_get_returns_response_payload(self) -> None:
        expected = materialize(self.response_spec)
        for mode in Mode:
            result = self.conn.call(MsgType.GET_REQ, None, mode)
            self.assertEqual([bytes(b) for b in result.buffers], list(expected.buffers))

    def test_request_ids_increase(self) -> None:
        ids = [self.conn.call(MsgType.PUT_REQ, self.payload).request_id for _ in range(5)]
        self.assertEqual(ids, sorted(ids))
        self.assertEqual(len(set(ids)), 5)

    def test_modes_interleave_on_one_connection(self) -> None:
        for index in range(10):
            mode = Mode(index % 2)
            result = self.conn.call(MsgType.ECHO_REQ, self.payload, mode)
            self.assertEqual(b"".join(result.buffers), b"".join(self.payload.buffers))

    def test_payload_rules(self) -> None:
        with self.assertRaises(ConfigError):
            self.conn.call(MsgType.GET_REQ, self.payload)
        with self.assertRaises(ConfigError):
            self.conn.call(MsgType.ECHO_REQ, None)
        with self.assertRaises(ConfigError):
            self.conn.call(MsgType.ACK, self.payload)

    def test_malformed_frame_closes_only_that_connection(self) -> None:
        endpoint = self.endpoints()[0]
        with socket.create_connection((endpoint.host, endpoint.port), timeout=5) as rogue:
            rogue.sendall(b"XXXX" + b"\0" * 20)
            self.assertEqual(rogue.recv(16), b"")
        result = self.conn.call(MsgType.ECHO_REQ, self.payload)
        self.assertEqual(len(result.buffers), len(self.payload.buffers))

    def test_many_connections(self) -> None:
        conns = [connect(self.endpoints()[0], counters=NetCounters()) for _ in range(4)]
        try:
            for conn in conns:
                result = conn.call(MsgType.ECHO_REQ, self.payload)
                self.assertEqual(result.content_bytes, self.payload.total_bytes)
        finally:
            for conn in conns:
                conn.close()


class TestCapture(ServerTestBase):
    def test_distinct_digests_recorded_in_order(self) -> None:
        first = materialize(small_spec(seed=1))
        second = materialize(small_spec(seed=2))
        conn = connect(self.endpoints()[0], capture=True, counters=NetCounters())
        try:
            for payload in (first, first, second, first):
                conn.call(MsgType.PUT_REQ, payload)
        finally:
            conn.close()
        self.assertEqual(
            conn.captured_digests,
            [content_digest(first.buffers), content_digest(second.buffers)],
        )


class TestConnect(unittest.TestCase):
    def test_refused_raises_connect_error(self) -> None:
        endpoint = Endpoint(LOOPBACK, unused_port())
        with self.assertRaises(ConnectError) as ctx:
            connect(endpoint, attempts=2)
        self.assertIn(str(endpoint), str(ctx.exception))

    def test_server_stop_refuses_new_connections(self) -> None:
        server = PsServer(ServerConfig(Endpoint(LOOPBACK, 0), small_spec()), NetCounters())
        endpoint = server.start()
        conn = connect(endpoint, counters=NetCounters())
        conn.close()
        server.stop()
        self.assertFalse(server.running)
        with self.assertRaises(ConnectError):
            connect(endpoint)

    def test_stop_is_prompt_and_final(self) -> None:
        for _ in range(8):
            server = PsServer(ServerConfig(Endpoint(LOOPBACK, 0), small_spec()), NetCounters())
            endpoint = server.start()
            connect(endpoint, counters=NetCounters()).close()
            started = time.monotonic()
            server.stop()
            self.assertLess(time.monotonic() - started, 1.0)
            with self.assertRaises(ConnectError):
                connect(endpoint)

    def test_serve_until_stop_requested(self) -> None:
        started = threading.Event()
        servers: T.List[PsServer] = []

        def on_ready(server: PsServer) -> None:
            servers.append(server)
            started.set()

        config = ServerConfig(Endpoint(LOOPBACK, 0), small_spec())
        thread = threading.Thread(
            target=serve, args=(config,), kwargs={"on_ready": on_ready}, daemon=True
        )
        thread.start()
        self.assertTrue(started.wait(timeout=5))
        conn = connect(servers[0].endpoint, counters=NetCounters())
        try:
            result = conn.call(MsgType.GET_REQ, None, Mode.SERIALIZED)
            self.assertEqual(len(result.buffers), len(small_spec().buffers))
        finally:
            conn.close()
        servers[0].request_stop()
        thread.join(timeout=5)
        self.assertFalse(thread.is_alive())
        self.assertFalse(servers[0].running)

    def test_bind_conflict_is_startup_error(self) -> None:
        first = PsServer(ServerConfig(Endpoint(LOOPBACK, 0), small_spec()), NetCounters())
        endpoint = first.start()
        try:
            second = PsServer(ServerConfig(endpoint, small_spec()), NetCounters())
            with self.assertRaises(RuntimeError):
                second.start()
        finally:
            first.stop()


if __name__ == "__main__":
    unittest.main()
