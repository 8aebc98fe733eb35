import abc
import os
import socket
import sys
import threading
import typing as T
from dataclasses import dataclass

from ps_rpc_bench.errors import TransportError

Buffer = T.Union[bytes, bytearray, memoryview]


def _iov_max() -> int:
    if not hasattr(socket.socket, "sendmsg"):
        return 1
    if sys.platform == "win32":
        return 16
    try:
        return int(os.sysconf("SC_IOV_MAX"))
    except (AttributeError, ValueError, OSError):
        return 16


SENDMSG_MAX_COUNT = _iov_max()


@dataclass(frozen=True)
class NetSnapshot:
    tx_bytes: int
    rx_bytes: int


class NetCounters:
    """Process-wide count of transport bytes written and read."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._tx = 0
        self._rx = 0

    def add_tx(self, count: int) -> None:
        with self._lock:
            self._tx += count

    def add_rx(self, count: int) -> None:
        with self._lock:
            self._rx += count

    def snapshot(self) -> NetSnapshot:
        with self._lock:
            return NetSnapshot(tx_bytes=self._tx, rx_bytes=self._rx)

    def reset(self) -> None:
        """Reset the counters (useful for testing)."""
        with self._lock:
            self._tx = 0
            self._rx = 0


NET_COUNTERS = NetCounters()


class Transport(abc.ABC):
    """Reliable, ordered byte stream with vectored writes.

    TCP is the shipped implementation; other stream transports plug in here.
    """

    def __init__(self, counters: T.Optional[NetCounters] = None) -> None:
        self.counters = counters if counters is not None else NET_COUNTERS
        # bytes moved by this stream alone
        self.tx_bytes = 0
        self.rx_bytes = 0

    @abc.abstractmethod
    def send_segments(self, segments: T.Sequence[Buffer]) -> int:
        """Write every segment in order; returns the byte count written."""

    @abc.abstractmethod
    def recv_exact_into(self, view: memoryview, allow_eof: bool = False) -> bool:
        """Fill ``view`` completely.

        Returns False only when ``allow_eof`` is set and the peer closed the
        stream before the first byte arrived.
        """

    @abc.abstractmethod
    def close(self) -> None:
        pass

    @property
    @abc.abstractmethod
    def peer(self) -> str:
        pass


class TcpTransport(Transport):
    def __init__(self, sock: socket.socket, counters: T.Optional[NetCounters] = None) -> None:
        super().__init__(counters)
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            host, port = sock.getpeername()[:2]
            self._peer = f"{host}:{port}"
        except OSError:
            self._peer = "<unconnected>"

    @property
    def peer(self) -> str:
        return self._peer

    def send_segments(self, segments: T.Sequence[Buffer]) -> int:
        pending = [memoryview(seg).cast("B") for seg in segments if len(seg)]
        total = 0
        try:
            while pending:
                batch = pending[:SENDMSG_MAX_COUNT]
                if len(batch) == 1:
                    sent = self.sock.send(batch[0])
                else:
                    sent = self.sock.sendmsg(batch)
                total += sent
                self.tx_bytes += sent
                self.counters.add_tx(sent)
                pending = self._advance(pending, sent)
        except OSError as exc:
            raise TransportError(f"Send to {self.peer} failed: {exc}") from exc
        return total

    @staticmethod
    def _advance(pending: T.List[memoryview], sent: int) -> T.List[memoryview]:
        index = 0
        while index < len(pending) and sent >= len(pending[index]):
            sent -= len(pending[index])
            index += 1
        remaining = pending[index:]
        if remaining and sent:
            remaining[0] = remaining[0][sent:]
        return remaining

    def recv_exact_into(self, view: memoryview, allow_eof: bool = False) -> bool:
        received = 0
        wanted = len(view)
        try:
            while received < wanted:
                count = self.sock.recv_into(view[received:], wanted - received)
                if count == 0:
                    if received == 0 and allow_eof:
                        return False
                    raise TransportError(
                        f"Connection to {self.peer} closed after {received} of {wanted} bytes"
                    )
                received += count
                self.rx_bytes += count
                self.counters.add_rx(count)
        except TransportError:
            raise
        except OSError as exc:
            raise TransportError(f"Receive from {self.peer} failed: {exc}") from exc
        return True

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
