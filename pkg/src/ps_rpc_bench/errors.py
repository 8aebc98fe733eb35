"""Exception hierarchy shared by every ps_rpc_bench module.

Each error also derives from the closest builtin so callers that only know
about ``ValueError`` / ``ConnectionError`` keep working.
"""

import typing as T


class BenchError(Exception):
    """Base class for all benchmark errors."""


class ConfigError(BenchError, ValueError):
    """A configuration value violates a documented bound."""


class RangeError(ConfigError):
    """A byte count falls outside the Small/Medium/Large taxonomy."""


class EncodingError(BenchError, ValueError):
    """A payload cannot be represented on the wire."""


class ProtocolError(BenchError, ValueError):
    """A frame header or body does not follow the wire format."""


class TruncationError(ProtocolError):
    """The parsed body does not account for exactly body_length bytes."""


class MalformedFrameError(ProtocolError):
    """A declared length runs past the end of the body."""


class TransportError(BenchError, ConnectionError):
    """The underlying byte stream failed."""


class ConnectError(TransportError):
    def __init__(self, endpoint: T.Any, reason: str) -> None:
        super().__init__(f"Unable to connect to {endpoint}: {reason}")
        self.endpoint = endpoint
        self.reason = reason


class CallError(TransportError):
    """The transport failed while a request/response was in flight."""


class IntegrityError(BenchError):
    """An echoed payload differs from the payload that was sent."""


class StatsError(BenchError, ValueError):
    """Statistics were requested over an empty sample set."""


class RunFailure(BenchError):
    """A benchmark repeat (or every repeat) produced no usable result."""


class StartupError(BenchError, RuntimeError):
    """A server could not bind or a peer was unreachable."""


class OrchestrationError(BenchError, RuntimeError):
    """A spawned child failed, timed out, or reported a mismatched config."""
