"""
Bit-exact frame format, version 0x01.

Header (24 bytes, little-endian integers)::

    offset  size  field
         0     4  magic        ASCII "TFGB"
         4     1  version      0x01
         5     1  msg_type     0x01 ECHO_REQ .. 0x06 GET_RESP
         6     1  mode         0x00 non-serialized, 0x01 serialized
         7     1  reserved     0x00
         8     8  request_id   u64
        16     8  body_length  u64, exact byte length of the body

Non-serialized body: u32 buffer_count, then per buffer u32 length + raw bytes.
Sent as a segment list so payload buffers go to the socket without a copy.

Serialized body: per buffer the tag byte 0x0A, an unsigned LEB128 length and
the bytes, all copied into one contiguous allocation. The buffer count is
recovered by parsing to the end of the body.

ACK bodies are empty (body_length 0) in both modes.
"""

import enum
import struct
import typing as T
from dataclasses import dataclass

from ps_rpc_bench.errors import (
    ConfigError,
    EncodingError,
    MalformedFrameError,
    ProtocolError,
    TruncationError,
)
from ps_rpc_bench.workload import MAX_BUFFER_BYTES, Payload

if T.TYPE_CHECKING:
    from ps_rpc_bench.transport import Transport

MAGIC = b"TFGB"
VERSION = 0x01
RESERVED = 0x00

HEADER = struct.Struct("<4sBBBBQQ")
HEADER_SIZE = HEADER.size
U32 = struct.Struct("<I")
U32_MAX = 0xFFFFFFFF

TLV_TAG = 0x0A
MAX_VARINT_BYTES = 5

DEFAULT_MAX_BODY_LENGTH = 1 << 30

Buffer = T.Union[bytes, bytearray, memoryview]


class MsgType(enum.IntEnum):
    ECHO_REQ = 0x01
    ECHO_RESP = 0x02
    PUT_REQ = 0x03
    ACK = 0x04
    GET_REQ = 0x05
    GET_RESP = 0x06


class Mode(enum.IntEnum):
    NON_SERIALIZED = 0x00
    SERIALIZED = 0x01

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @staticmethod
    def parse(value: T.Union[str, int, "Mode"]) -> "Mode":
        if isinstance(value, Mode):
            return value
        if isinstance(value, int):
            return Mode(value)
        text = value.strip().lower().replace("_", "-")
        for mode in Mode:
            if mode.label == text:
                return mode
        raise ConfigError(f"Unknown mode {value!r}; expected non-serialized or serialized")


@dataclass(frozen=True)
class FrameHeader:
    msg_type: MsgType
    mode: Mode
    request_id: int
    body_length: int

    def pack(self) -> bytes:
        return HEADER.pack(
            MAGIC,
            VERSION,
            int(self.msg_type),
            int(self.mode),
            RESERVED,
            self.request_id,
            self.body_length,
        )


@dataclass
class SegmentList:
    """Scatter-gather view of one frame; payload segments are the caller's buffers."""

    header: FrameHeader
    segments: T.List[Buffer]

    @property
    def body_length(self) -> int:
        return self.header.body_length

    @property
    def total_length(self) -> int:
        return HEADER_SIZE + self.header.body_length

    def flatten(self) -> bytes:
        return b"".join(self.segments)


@dataclass
class DecodedFrame:
    msg_type: MsgType
    request_id: int
    buffers: T.List[memoryview]
    mode: Mode
    consumed: int = 0

    @property
    def content_bytes(self) -> int:
        return sum(len(buf) for buf in self.buffers)


def _buffers_of(payload: T.Union[Payload, T.Sequence[Buffer]]) -> T.Sequence[Buffer]:
    return payload.buffers if isinstance(payload, Payload) else payload


def _check_request_id(request_id: int) -> None:
    if not 0 <= request_id < 1 << 64:
        raise EncodingError(f"request_id {request_id} is not a 64-bit unsigned value")


def encode_varint(value: int) -> bytes:
    if value < 0 or value > U32_MAX:
        raise EncodingError(f"Length {value} does not fit in 32 bits")
    out = bytearray()
    while True:
        part = value & 0x7F
        value >>= 7
        if value:
            out.append(part | 0x80)
        else:
            out.append(part)
            return bytes(out)


def decode_varint(data: Buffer, pos: int, end: int) -> T.Tuple[int, int]:
    """Decode one LEB128 value from data[pos:end]; returns (value, next_pos)."""
    value = 0
    shift = 0
    for count in range(MAX_VARINT_BYTES):
        if pos >= end:
            raise MalformedFrameError("Truncated varint length")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if not byte & 0x80:
            if value > U32_MAX or (count and byte == 0):
                raise MalformedFrameError(f"Non-canonical or oversized varint {value}")
            return value, pos
        shift += 7
    raise MalformedFrameError("Varint longer than 5 bytes")


def framing_overhead(
    lengths: T.Sequence[int], mode: Mode, msg_type: MsgType = MsgType.PUT_REQ
) -> int:
    """Header plus body-prefix bytes a frame adds on top of its buffer content."""
    if msg_type == MsgType.ACK:
        return HEADER_SIZE
    if mode == Mode.NON_SERIALIZED:
        return HEADER_SIZE + U32.size + U32.size * len(lengths)
    return HEADER_SIZE + sum(1 + len(encode_varint(length)) for length in lengths)


def _encodable_length(buf: Buffer) -> int:
    length = len(buf)
    if length > MAX_BUFFER_BYTES:
        raise EncodingError(f"Buffer length {length} exceeds {MAX_BUFFER_BYTES} bytes")
    return length


def encode_ack(request_id: int, mode: Mode = Mode.NON_SERIALIZED) -> SegmentList:
    _check_request_id(request_id)
    header = FrameHeader(MsgType.ACK, Mode(mode), request_id, 0)
    return SegmentList(header=header, segments=[header.pack()])


def encode_nonserialized(
    payload: T.Union[Payload, T.Sequence[Buffer]], msg_type: MsgType, request_id: int
) -> SegmentList:
    if msg_type == MsgType.ACK:
        return encode_ack(request_id, Mode.NON_SERIALIZED)
    _check_request_id(request_id)
    buffers = _buffers_of(payload)
    if len(buffers) > U32_MAX:
        raise EncodingError(f"Buffer count {len(buffers)} does not fit in 32 bits")

    segments: T.List[Buffer] = [b"", U32.pack(len(buffers))]
    body_length = U32.size
    for buf in buffers:
        length = _encodable_length(buf)
        segments.append(U32.pack(length))
        segments.append(buf)
        body_length += U32.size + length

    header = FrameHeader(MsgType(msg_type), Mode.NON_SERIALIZED, request_id, body_length)
    segments[0] = header.pack()
    return SegmentList(header=header, segments=segments)


def encode_serialized(
    payload: T.Union[Payload, T.Sequence[Buffer]], msg_type: MsgType, request_id: int
) -> bytearray:
    if msg_type == MsgType.ACK:
        return bytearray(encode_ack(request_id, Mode.SERIALIZED).flatten())
    _check_request_id(request_id)
    buffers = _buffers_of(payload)
    prefixes = [encode_varint(_encodable_length(buf)) for buf in buffers]
    body_length = sum(1 + len(prefix) + len(buf) for prefix, buf in zip(prefixes, buffers))

    header = FrameHeader(MsgType(msg_type), Mode.SERIALIZED, request_id, body_length)
    frame = bytearray(HEADER_SIZE + body_length)
    frame[:HEADER_SIZE] = header.pack()
    pos = HEADER_SIZE
    for prefix, buf in zip(prefixes, buffers):
        frame[pos] = TLV_TAG
        pos += 1
        frame[pos : pos + len(prefix)] = prefix
        pos += len(prefix)
        frame[pos : pos + len(buf)] = buf
        pos += len(buf)
    return frame


def encode(
    payload: T.Union[Payload, T.Sequence[Buffer]], msg_type: MsgType, request_id: int, mode: Mode
) -> T.List[Buffer]:
    """Segments ready for a vectored write, whichever mode is asked for."""
    if mode == Mode.SERIALIZED:
        return [encode_serialized(payload, msg_type, request_id)]
    return encode_nonserialized(payload, msg_type, request_id).segments


def decode_header(data: Buffer) -> FrameHeader:
    if len(data) < HEADER_SIZE:
        raise TruncationError(f"Header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, msg_type, mode, reserved, request_id, body_length = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ProtocolError(f"Bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise ProtocolError(f"Unsupported version {version:#04x}")
    if reserved != RESERVED:
        raise ProtocolError(f"Reserved byte must be zero, got {reserved:#04x}")
    try:
        parsed_type = MsgType(msg_type)
    except ValueError as exc:
        raise ProtocolError(f"Unknown msg_type {msg_type:#04x}") from exc
    try:
        parsed_mode = Mode(mode)
    except ValueError as exc:
        raise ProtocolError(f"Unknown mode {mode:#04x}") from exc
    if parsed_type == MsgType.ACK and body_length != 0:
        raise ProtocolError(f"ACK must have an empty body, body_length={body_length}")
    return FrameHeader(parsed_type, parsed_mode, request_id, body_length)


def _check_buffer_length(length: int, pos: int, end: int) -> None:
    if length > MAX_BUFFER_BYTES:
        raise MalformedFrameError(f"Buffer length {length} exceeds {MAX_BUFFER_BYTES} bytes")
    if pos + length > end:
        raise MalformedFrameError(
            f"Buffer length {length} runs past the body ({end - pos} bytes left)"
        )


def _decode_nonserialized_body(body: memoryview) -> T.List[memoryview]:
    end = len(body)
    if end < U32.size:
        raise MalformedFrameError(f"Body of {end} bytes cannot hold a buffer count")
    (count,) = U32.unpack_from(body, 0)
    if count * U32.size > end - U32.size:
        raise MalformedFrameError(f"Buffer count {count} cannot fit in {end} body bytes")
    pos = U32.size
    buffers: T.List[memoryview] = []
    for _ in range(count):
        if pos + U32.size > end:
            raise MalformedFrameError("Length prefix runs past the body")
        (length,) = U32.unpack_from(body, pos)
        pos += U32.size
        _check_buffer_length(length, pos, end)
        buffers.append(body[pos : pos + length])
        pos += length
    if pos != end:
        raise TruncationError(f"Parsed buffers cover {pos} of {end} body bytes")
    return buffers


def _decode_serialized_body(body: memoryview) -> T.List[memoryview]:
    end = len(body)
    pos = 0
    buffers: T.List[memoryview] = []
    while pos < end:
        if body[pos] != TLV_TAG:
            raise MalformedFrameError(f"Expected tag {TLV_TAG:#04x}, got {body[pos]:#04x}")
        length, pos = decode_varint(body, pos + 1, end)
        _check_buffer_length(length, pos, end)
        buffers.append(body[pos : pos + length])
        pos += length
    return buffers


def decode_body(header: FrameHeader, body: memoryview) -> T.List[memoryview]:
    if len(body) != header.body_length:
        raise TruncationError(f"Body has {len(body)} bytes, header declares {header.body_length}")
    if header.msg_type == MsgType.ACK:
        return []
    if header.mode == Mode.NON_SERIALIZED:
        return _decode_nonserialized_body(body)
    return _decode_serialized_body(body)


def decode(data: Buffer) -> DecodedFrame:
    """Decode one frame from the start of ``data``; bytes past the frame are left alone."""
    view = memoryview(data)
    header = decode_header(view)
    end = HEADER_SIZE + header.body_length
    if len(view) < end:
        raise TruncationError(f"Frame declares {end} bytes, only {len(view)} available")
    buffers = decode_body(header, view[HEADER_SIZE:end])
    return DecodedFrame(
        msg_type=header.msg_type,
        request_id=header.request_id,
        buffers=buffers,
        mode=header.mode,
        consumed=end,
    )


class FrameReader:
    """Reads whole frames off a transport. Owned by a single reader."""

    def __init__(
        self, transport: "Transport", max_body_length: int = DEFAULT_MAX_BODY_LENGTH
    ) -> None:
        self.transport = transport
        self.max_body_length = max_body_length
        self._header = bytearray(HEADER_SIZE)

    def read_frame(self) -> T.Optional[DecodedFrame]:
        """Next frame, or None if the peer closed the stream between frames."""
        if not self.transport.recv_exact_into(memoryview(self._header), allow_eof=True):
            return None
        header = decode_header(self._header)
        if header.body_length > self.max_body_length:
            raise ProtocolError(
                f"body_length {header.body_length} exceeds limit {self.max_body_length}"
            )
        body = bytearray(header.body_length)
        if header.body_length:
            self.transport.recv_exact_into(memoryview(body))
        buffers = decode_body(header, memoryview(body))
        return DecodedFrame(
            msg_type=header.msg_type,
            request_id=header.request_id,
            buffers=buffers,
            mode=header.mode,
            consumed=HEADER_SIZE + header.body_length,
        )
