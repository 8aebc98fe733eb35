"""
Parameter-server and worker endpoints.

The PS answers three exchanges on every connection, strictly in order:

    ECHO_REQ(p) -> ECHO_RESP(p)
    PUT_REQ(p)  -> ACK
    GET_REQ     -> GET_RESP(materialize(response_spec))

Responses reuse the request's mode and request_id. Workers hold one
Connection per PS and issue serial, blocking calls on it.
"""

import socket
import threading
import time
import typing as T
from dataclasses import dataclass, field

from ryutils import log
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from ps_rpc_bench.errors import (
    CallError,
    ConfigError,
    ConnectError,
    ProtocolError,
    StartupError,
    TransportError,
)
from ps_rpc_bench.transport import NetCounters, TcpTransport, Transport
from ps_rpc_bench.wire import Buffer, FrameReader, Mode, MsgType, encode
from ps_rpc_bench.workload import Payload, PayloadSpec, content_digest, materialize

DEFAULT_HOST = "localhost"
DEFAULT_PORT = 50001
CONNECT_TIMEOUT_SECS = 5.0
LISTEN_BACKLOG = 128
ACCEPT_POLL_SECS = 0.2
JOIN_TIMEOUT_SECS = 2.0

RESPONSE_TYPES: T.Dict[MsgType, MsgType] = {
    MsgType.ECHO_REQ: MsgType.ECHO_RESP,
    MsgType.PUT_REQ: MsgType.ACK,
    MsgType.GET_REQ: MsgType.GET_RESP,
}


@dataclass(frozen=True)
class Endpoint:
    host: str = DEFAULT_HOST
    port: int = DEFAULT_PORT

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535 and self.port != 0:
            raise ConfigError(f"Port {self.port} outside the valid range [1, 65535]")

    def __str__(self) -> str:
        return f"{self.host}:{self.port}"

    @staticmethod
    def parse(text: str) -> "Endpoint":
        host, sep, port = text.strip().rpartition(":")
        if not sep or not host:
            raise ConfigError(f"Endpoint {text!r} is not of the form host:port")
        try:
            number = int(port)
        except ValueError as exc:
            raise ConfigError(f"Endpoint {text!r} has a non-numeric port") from exc
        return Endpoint(host=host.strip("[]"), port=number)

    @staticmethod
    def consecutive(host: str, base_port: int, count: int) -> T.List["Endpoint"]:
        """PS endpoints on ports base..base+count-1."""
        return [Endpoint(host=host, port=base_port + i) for i in range(count)]


@dataclass
class ServerConfig:
    endpoint: Endpoint
    response_spec: PayloadSpec
    mode: Mode = Mode.NON_SERIALIZED


class PsServer:
    """
    Threaded parameter server: one handler thread per worker connection.

    Example usage:
    ```python
    server = PsServer(ServerConfig(Endpoint("127.0.0.1", 0), spec))
    server.start()
    print(server.endpoint)  # bound port filled in
    ...
    server.stop()
    ```
    """

    def __init__(
        self,
        config: ServerConfig,
        counters: T.Optional[NetCounters] = None,
        verbose: bool = False,
    ) -> None:
        self.config = config
        self.counters = counters
        self.verbose = verbose
        # immutable once started; shared read-only by every handler
        self.response_payload: Payload = materialize(config.response_spec)
        self._listener: T.Optional[socket.socket] = None
        self._accept_thread: T.Optional[threading.Thread] = None
        self._stop_flag = threading.Event()
        self._lock = threading.Lock()
        self._connections: T.Set[Transport] = set()
        self._handlers: T.List[threading.Thread] = []
        self._bound: T.Optional[Endpoint] = None

    @property
    def endpoint(self) -> Endpoint:
        return self._bound if self._bound is not None else self.config.endpoint

    @property
    def running(self) -> bool:
        return self._accept_thread is not None and not self._stop_flag.is_set()

    def start(self) -> Endpoint:
        if self.running:
            return self.endpoint
        endpoint = self.config.endpoint
        try:
            listener = socket.create_server(
                (endpoint.host, endpoint.port), backlog=LISTEN_BACKLOG, reuse_port=False
            )
        except OSError as exc:
            raise StartupError(f"Unable to bind parameter server on {endpoint}: {exc}") from exc

        listener.settimeout(ACCEPT_POLL_SECS)
        self._listener = listener
        self._bound = Endpoint(host=endpoint.host, port=listener.getsockname()[1])
        self._stop_flag.clear()
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"ps-accept-{self._bound.port}", daemon=True
        )
        self._accept_thread.start()
        log.print_ok_arrow(f"Parameter server listening on {self._bound}")
        return self._bound

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop_flag.wait(timeout=0.5):
                pass
        finally:
            self.stop()

    def request_stop(self) -> None:
        """Ask serve_forever to return; safe to call from a signal handler."""
        self._stop_flag.set()

    def stop(self) -> None:
        self._stop_flag.set()
        listener, self._listener = self._listener, None
        if listener is not None:
            # closing alone leaves a thread blocked in accept() listening on Linux
            try:
                listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            listener.close()
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=JOIN_TIMEOUT_SECS)
            self._accept_thread = None
        with self._lock:
            connections = list(self._connections)
            self._connections.clear()
        for transport in connections:
            transport.close()
        for handler in self._handlers:
            handler.join(timeout=JOIN_TIMEOUT_SECS)
        self._handlers = []

    def _accept_loop(self) -> None:
        listener = self._listener
        assert listener is not None
        while not self._stop_flag.is_set():
            try:
                sock, _ = listener.accept()
            except socket.timeout:
                continue
            except OSError:
                if self._stop_flag.is_set():
                    return
                continue
            if self._stop_flag.is_set():
                sock.close()
                return
            sock.settimeout(None)
            transport = TcpTransport(sock, counters=self.counters)
            with self._lock:
                self._connections.add(transport)
            handler = threading.Thread(
                target=self._handle_connection,
                args=(transport,),
                name=f"ps-conn-{transport.peer}",
                daemon=True,
            )
            self._handlers = [h for h in self._handlers if h.is_alive()]
            self._handlers.append(handler)
            handler.start()

    def _respond(self, msg_type: MsgType, buffers: T.Sequence[Buffer]) -> T.Sequence[Buffer]:
        if msg_type == MsgType.ECHO_REQ:
            return buffers
        if msg_type == MsgType.GET_REQ:
            return self.response_payload.buffers
        return []

    def _handle_connection(self, transport: Transport) -> None:
        reader = FrameReader(transport)
        try:
            while not self._stop_flag.is_set():
                frame = reader.read_frame()
                if frame is None:
                    break
                response_type = RESPONSE_TYPES.get(frame.msg_type)
                if response_type is None:
                    raise ProtocolError(f"{frame.msg_type.name} is not a request type")
                if self.verbose:
                    log.print_normal(
                        f"{transport.peer} {frame.msg_type.name} id={frame.request_id} "
                        f"mode={frame.mode.label} buffers={len(frame.buffers)}"
                    )
                body = self._respond(frame.msg_type, frame.buffers)
                transport.send_segments(
                    encode(body, response_type, frame.request_id, frame.mode)
                )
        except ProtocolError as exc:
            log.print_fail(f"Closing {transport.peer}: malformed frame: {exc}")
        except TransportError as exc:
            if not self._stop_flag.is_set() and self.verbose:
                log.print_warn(f"Connection {transport.peer} dropped: {exc}")
        finally:
            with self._lock:
                self._connections.discard(transport)
            transport.close()


def serve(
    config: ServerConfig,
    counters: T.Optional[NetCounters] = None,
    verbose: bool = False,
    on_ready: T.Optional[T.Callable[[PsServer], None]] = None,
) -> PsServer:
    """Bind, call ``on_ready(server)``, then serve until ``request_stop`` (SIGTERM in the CLI)."""
    server = PsServer(config, counters=counters, verbose=verbose)
    server.start()
    if on_ready is not None:
        on_ready(server)
    server.serve_forever()
    return server


@dataclass
class CallResult:
    buffers: T.List[memoryview]
    elapsed_ns: int
    request_id: int

    @property
    def content_bytes(self) -> int:
        return sum(len(buf) for buf in self.buffers)


@dataclass
class Connection:
    """One established stream between a worker and one PS. Confined to one thread."""

    endpoint: Endpoint
    transport: Transport
    capture: bool = False
    next_request_id: int = 1
    captured_digests: T.List[str] = field(default_factory=list)
    reader: FrameReader = field(init=False)

    def __post_init__(self) -> None:
        self.reader = FrameReader(self.transport)

    def call(
        self,
        msg_type: MsgType,
        payload: T.Optional[T.Union[Payload, T.Sequence[Buffer]]] = None,
        mode: Mode = Mode.NON_SERIALIZED,
    ) -> CallResult:
        if msg_type not in RESPONSE_TYPES:
            raise ConfigError(f"{MsgType(msg_type).name} is not a request type")
        buffers: T.Sequence[Buffer] = ()
        if payload is not None:
            buffers = payload.buffers if isinstance(payload, Payload) else payload
        if (msg_type == MsgType.GET_REQ) != (len(buffers) == 0):
            raise ConfigError("A payload is required for ECHO/PUT and forbidden for GET")

        request_id = self.next_request_id
        self.next_request_id += 1
        if self.capture and buffers:
            digest = content_digest(buffers)
            if digest not in self.captured_digests:
                self.captured_digests.append(digest)

        start = time.perf_counter_ns()
        try:
            self.transport.send_segments(encode(buffers, msg_type, request_id, mode))
            frame = self.reader.read_frame()
        except TransportError as exc:
            raise CallError(f"Call {request_id} to {self.endpoint} failed: {exc}") from exc
        elapsed = time.perf_counter_ns() - start

        if frame is None:
            raise CallError(f"{self.endpoint} closed the connection during call {request_id}")
        if frame.request_id != request_id:
            raise ProtocolError(
                f"Response id {frame.request_id} does not match request id {request_id}"
            )
        if frame.msg_type != RESPONSE_TYPES[msg_type]:
            raise ProtocolError(
                f"Expected {RESPONSE_TYPES[msg_type].name}, got {frame.msg_type.name}"
            )
        return CallResult(buffers=frame.buffers, elapsed_ns=elapsed, request_id=request_id)

    def close(self) -> None:
        self.transport.close()


def connect(
    endpoint: Endpoint,
    attempts: int = 1,
    timeout: float = CONNECT_TIMEOUT_SECS,
    counters: T.Optional[NetCounters] = None,
    capture: bool = False,
) -> Connection:
    """Open a connection, retrying refused attempts with exponential backoff."""
    try:
        for attempt in Retrying(
            stop=stop_after_attempt(max(1, attempts)),
            wait=wait_exponential(multiplier=0.1, min=0.1, max=2.0),
            retry=retry_if_exception_type(OSError),
            reraise=True,
        ):
            with attempt:
                sock = socket.create_connection((endpoint.host, endpoint.port), timeout=timeout)
    except OSError as exc:
        raise ConnectError(endpoint, str(exc)) from exc
    sock.settimeout(None)
    return Connection(
        endpoint=endpoint, transport=TcpTransport(sock, counters=counters), capture=capture
    )
