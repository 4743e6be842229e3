"""Binary wire protocol between controller and simulator.

Framing: every message is a 4-byte little-endian unsigned payload length
followed by the payload. The payload is one kind byte followed by the
message fields in fixed order. There are no per-field tags; `PROTOCOL.md`
documents the byte layout together with hex conformance vectors.

Field encodings:
  u8 / bool      1 byte (bool: 0x00 or 0x01)
  u16 / u32 / u64  little-endian
  f64            IEEE-754 binary64 little-endian
  string         u32 byte length + UTF-8 bytes
  Value          1 tag byte + tag-specific payload
  Distribution   1 tag byte + u32 parameter count + parameters as f64
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .distributions import Distribution, DistTag, InvalidParameters
from .values import TensorValue, Value, ValueTag

PROTOCOL_VERSION = 1

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")
_F64 = struct.Struct("<d")


class MessageKind(enum.IntEnum):
    HANDSHAKE = 1
    HANDSHAKE_RESULT = 2
    RUN = 3
    RUN_RESULT = 4
    SAMPLE_REQUEST = 5
    SAMPLE_REPLY = 6
    OBSERVE_NOTIFY = 7
    OBSERVE_ACK = 8


class EncodeError(ValueError):
    def __init__(self, field_name: str, message: str = ""):
        super().__init__(f"{field_name}: {message}" if message else field_name)
        self.field_name = field_name


class ProtocolError(ValueError):
    pass


class NeedMoreBytes(Exception):
    """Input holds no complete frame; `count` more bytes are required."""

    def __init__(self, count: int):
        super().__init__(f"need {count} more bytes")
        self.count = count


class SessionError(ValueError):
    def __init__(self, state: "SessionState", got: MessageKind, expected):
        names = ", ".join(k.name for k in expected)
        super().__init__(f"in state {state.name} got {got.name}, expected one of: {names}")
        self.state = state
        self.got = got
        self.expected = tuple(expected)


# ---------------------------------------------------------------------------
# message types


@dataclass(frozen=True)
class Handshake:
    version: int = PROTOCOL_VERSION
    name: str = ""
    kind = MessageKind.HANDSHAKE


@dataclass(frozen=True)
class HandshakeResult:
    version: int = PROTOCOL_VERSION
    ok: bool = True
    kind = MessageKind.HANDSHAKE_RESULT


@dataclass(frozen=True)
class Run:
    observation: Optional[Value] = None
    kind = MessageKind.RUN


@dataclass(frozen=True)
class RunResult:
    result: Value
    kind = MessageKind.RUN_RESULT


@dataclass(frozen=True)
class SampleRequest:
    address: str
    name: str
    distribution: Distribution
    control: bool = True
    replace: bool = False
    kind = MessageKind.SAMPLE_REQUEST


@dataclass(frozen=True)
class SampleReply:
    value: Value
    kind = MessageKind.SAMPLE_REPLY


@dataclass(frozen=True)
class ObserveNotify:
    """Conditioning statement. When `observed_value` is None the controller
    draws the value itself (offline generation from p(x, y)) and returns it
    in the ObserveAck."""

    address: str
    distribution: Distribution
    observed_value: Optional[Value]
    kind = MessageKind.OBSERVE_NOTIFY


@dataclass(frozen=True)
class ObserveAck:
    returned_value: Optional[Value] = None
    kind = MessageKind.OBSERVE_ACK


WireMessage = Union[
    Handshake, HandshakeResult, Run, RunResult,
    SampleRequest, SampleReply, ObserveNotify, ObserveAck,
]


# ---------------------------------------------------------------------------
# encoding


def _enc_string(out: bytearray, s: str, field: str):
    if not isinstance(s, str):
        raise EncodeError(field, "not a string")
    raw = s.encode("utf-8")
    out += _U32.pack(len(raw))
    out += raw


def _enc_value(out: bytearray, v: Value, field: str):
    if not isinstance(v, Value):
        raise EncodeError(field, "not a Value")
    out.append(int(v.tag))
    if v.tag == ValueTag.F64:
        out += _F64.pack(float(v.payload))
    elif v.tag == ValueTag.I64:
        out += _I64.pack(int(v.payload))
    elif v.tag == ValueTag.BOOL:
        out.append(1 if v.payload else 0)
    elif v.tag == ValueTag.STRING:
        _enc_string(out, v.payload, field)
    elif v.tag == ValueTag.TENSOR:
        t: TensorValue = v.payload
        out += _U32.pack(len(t.shape))
        for d in t.shape:
            out += _U32.pack(d)
        out += t.data.astype("<f8").tobytes()
    else:  # pragma: no cover
        raise EncodeError(field, f"unknown value tag {v.tag}")


def _enc_distribution(out: bytearray, d: Distribution, field: str):
    if not isinstance(d, Distribution):
        raise EncodeError(field, "not a Distribution")
    try:
        d.validate()
    except InvalidParameters as e:
        raise EncodeError(e.field_name, str(e)) from e
    out.append(int(d.tag))
    out += _U32.pack(len(d.params))
    out += d.params.astype("<f8").tobytes()


def encode(m: WireMessage) -> bytes:
    """Encode a message into one complete frame (length prefix included)."""
    body = bytearray()
    body.append(int(m.kind))
    k = m.kind
    if k == MessageKind.HANDSHAKE:
        body.append(m.version & 0xFF)
        _enc_string(body, m.name, "name")
    elif k == MessageKind.HANDSHAKE_RESULT:
        body.append(m.version & 0xFF)
        body.append(1 if m.ok else 0)
    elif k == MessageKind.RUN:
        if m.observation is None:
            body.append(0)
        else:
            body.append(1)
            _enc_value(body, m.observation, "observation")
    elif k == MessageKind.RUN_RESULT:
        _enc_value(body, m.result, "result")
    elif k == MessageKind.SAMPLE_REQUEST:
        if not m.address:
            raise EncodeError("address", "must be nonempty")
        _enc_string(body, m.address, "address")
        _enc_string(body, m.name, "name")
        _enc_distribution(body, m.distribution, "distribution")
        body.append(1 if m.control else 0)
        body.append(1 if m.replace else 0)
    elif k == MessageKind.SAMPLE_REPLY:
        _enc_value(body, m.value, "value")
    elif k == MessageKind.OBSERVE_NOTIFY:
        if not m.address:
            raise EncodeError("address", "must be nonempty")
        _enc_string(body, m.address, "address")
        _enc_distribution(body, m.distribution, "distribution")
        if m.observed_value is None:
            body.append(0)
        else:
            body.append(1)
            _enc_value(body, m.observed_value, "observed_value")
    elif k == MessageKind.OBSERVE_ACK:
        if m.returned_value is None:
            body.append(0)
        else:
            body.append(1)
            _enc_value(body, m.returned_value, "returned_value")
    else:  # pragma: no cover
        raise EncodeError("kind", f"unknown kind {k}")
    return _U32.pack(len(body)) + bytes(body)


# ---------------------------------------------------------------------------
# decoding


class _Reader:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ProtocolError(f"frame truncated: wanted {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def i64(self) -> int:
        return _I64.unpack(self.take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self.take(8))[0]

    def boolean(self) -> bool:
        b = self.u8()
        if b not in (0, 1):
            raise ProtocolError(f"invalid bool byte 0x{b:02X}")
        return bool(b)

    def string(self) -> str:
        n = self.u32()
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ProtocolError(f"invalid UTF-8 in string: {e}") from e

    def value(self) -> Value:
        tag = self.u8()
        try:
            vt = ValueTag(tag)
        except ValueError:
            raise ProtocolError(f"unknown value tag 0x{tag:02X}") from None
        if vt == ValueTag.F64:
            return Value(vt, self.f64())
        if vt == ValueTag.I64:
            return Value(vt, self.i64())
        if vt == ValueTag.BOOL:
            return Value(vt, self.boolean())
        if vt == ValueTag.STRING:
            return Value(vt, self.string())
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        n = 1
        for d in shape:
            n *= d
        data = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)
        return Value(vt, TensorValue(shape, data))

    def distribution(self) -> Distribution:
        tag = self.u8()
        try:
            dt = DistTag(tag)
        except ValueError:
            raise ProtocolError(f"unknown distribution tag 0x{tag:02X}") from None
        n = self.u32()
        params = np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)
        d = Distribution(dt, params)
        try:
            d.validate()
        except InvalidParameters as e:
            raise ProtocolError(f"invalid distribution parameters: {e}") from e
        return d


def decode_payload(payload: bytes) -> WireMessage:
    r = _Reader(payload)
    kind_byte = r.u8()
    try:
        k = MessageKind(kind_byte)
    except ValueError:
        raise ProtocolError(f"unknown kind byte 0x{kind_byte:02X}") from None
    if k == MessageKind.HANDSHAKE:
        m = Handshake(version=r.u8(), name=r.string())
    elif k == MessageKind.HANDSHAKE_RESULT:
        m = HandshakeResult(version=r.u8(), ok=r.boolean())
    elif k == MessageKind.RUN:
        m = Run(observation=r.value() if r.boolean() else None)
    elif k == MessageKind.RUN_RESULT:
        m = RunResult(result=r.value())
    elif k == MessageKind.SAMPLE_REQUEST:
        m = SampleRequest(address=r.string(), name=r.string(),
                          distribution=r.distribution(),
                          control=r.boolean(), replace=r.boolean())
    elif k == MessageKind.SAMPLE_REPLY:
        m = SampleReply(value=r.value())
    elif k == MessageKind.OBSERVE_NOTIFY:
        m = ObserveNotify(address=r.string(), distribution=r.distribution(),
                          observed_value=r.value() if r.boolean() else None)
    else:
        m = ObserveAck(returned_value=r.value() if r.boolean() else None)
    if r.pos != len(payload):
        raise ProtocolError(f"{len(payload) - r.pos} trailing bytes in frame")
    return m


def decode(data: bytes) -> WireMessage:
    """Decode exactly one complete frame.

    Raises NeedMoreBytes if the input is shorter than one frame, and
    ProtocolError if it is longer or malformed.
    """
    m, consumed = decode_prefix(data)
    if consumed != len(data):
        raise ProtocolError(f"{len(data) - consumed} bytes after frame end")
    return m


def decode_prefix(data: bytes) -> tuple[WireMessage, int]:
    """Decode the first frame in `data`; returns (message, bytes consumed)."""
    if len(data) < 4:
        raise NeedMoreBytes(4 - len(data))
    n = _U32.unpack(data[:4])[0]
    if len(data) < 4 + n:
        raise NeedMoreBytes(4 + n - len(data))
    return decode_payload(bytes(data[4:4 + n])), 4 + n


class StreamDecoder:
    """Incremental decoder for a byte stream of concatenated frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[WireMessage]:
        self._buf += data
        out = []
        while True:
            try:
                m, consumed = decode_prefix(self._buf)
            except NeedMoreBytes:
                break
            del self._buf[:consumed]
            out.append(m)
        return out

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# session ordering


def encode_value(v: Value) -> bytes:
    """Standalone Value encoding (tag byte + payload), shared by file formats."""
    out = bytearray()
    _enc_value(out, v, "value")
    return bytes(out)


def encode_distribution(d: Distribution) -> bytes:
    out = bytearray()
    _enc_distribution(out, d, "distribution")
    return bytes(out)


class ValueReader(_Reader):
    """Cursor-based reader over encoded Values/Distributions in file formats."""
    pass


class SessionState(enum.Enum):
    AWAITING_HANDSHAKE = enum.auto()
    AWAITING_HANDSHAKE_RESULT = enum.auto()
    AWAITING_RUN = enum.auto()
    IN_RUN = enum.auto()
    AWAITING_SAMPLE_REPLY = enum.auto()
    AWAITING_OBSERVE_ACK = enum.auto()


_TRANSITIONS: dict[SessionState, dict[MessageKind, SessionState]] = {
    SessionState.AWAITING_HANDSHAKE: {
        MessageKind.HANDSHAKE: SessionState.AWAITING_HANDSHAKE_RESULT,
    },
    SessionState.AWAITING_HANDSHAKE_RESULT: {
        MessageKind.HANDSHAKE_RESULT: SessionState.AWAITING_RUN,
    },
    SessionState.AWAITING_RUN: {
        MessageKind.RUN: SessionState.IN_RUN,
    },
    SessionState.IN_RUN: {
        MessageKind.SAMPLE_REQUEST: SessionState.AWAITING_SAMPLE_REPLY,
        MessageKind.OBSERVE_NOTIFY: SessionState.AWAITING_OBSERVE_ACK,
        MessageKind.RUN_RESULT: SessionState.AWAITING_RUN,
    },
    SessionState.AWAITING_SAMPLE_REPLY: {
        MessageKind.SAMPLE_REPLY: SessionState.IN_RUN,
    },
    SessionState.AWAITING_OBSERVE_ACK: {
        MessageKind.OBSERVE_ACK: SessionState.IN_RUN,
    },
}


def session_step(state: SessionState, m: Union[WireMessage, MessageKind]) -> SessionState:
    """Advance the session state machine by one message.

    The same machine validates a session transcript regardless of which side
    observes it, because request and reply kinds never overlap.
    """
    kind = m if isinstance(m, MessageKind) else m.kind
    table = _TRANSITIONS[state]
    nxt = table.get(kind)
    if nxt is None:
        raise SessionError(state, kind, tuple(table.keys()))
    return nxt


def validate_transcript(messages, start: SessionState = SessionState.AWAITING_HANDSHAKE) -> SessionState:
    state = start
    for m in messages:
        state = session_step(state, m)
    return state
