"""
Residual codec between agent and manager.

Readings are quantized to fixed-point integers at ingestion. The first
``baseline_n`` readings of a session travel in plaintext as baseline samples;
afterwards the agent sends only ``value_q - last_value_q``. The manager adds
each residual to its copy of ``last_value_q``, so reconstruction is exact
integer arithmetic.

Wire format (all integers little-endian), see docs/wire-format.md:

    header   sensor_id u32 | seq u32 | timestamp_ms u64 | status u8   (17 bytes)
    raw      header | value f64                                       (25 bytes)
    packet   header | zigzag varint residual_q [| 0x01 | count u32 | variance f64]
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal, InvalidOperation
from typing import BinaryIO, Iterator, Optional, Union

from .errors import DesyncError, InputError, QuantizationError, ReplayError
from .stats import RunningAggregate, aggregate_init, aggregate_update

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1

DEFAULT_SCALE_DIGITS = 4
DEFAULT_BASELINE_N = 50
DEFAULT_META_EVERY = 50


class Status(enum.IntEnum):
    OK = 0
    DEVICE_ERROR = 1
    ALARM = 2


class Side(enum.Enum):
    AGENT = "AGENT"
    MANAGER = "MANAGER"


class Phase(enum.Enum):
    BASELINE = "BASELINE"
    OBFUSCATED = "OBFUSCATED"


@dataclass(frozen=True)
class QuantizationSpec:
    scale_digits: int = DEFAULT_SCALE_DIGITS

    def __post_init__(self):
        if not (isinstance(self.scale_digits, int) and 0 <= self.scale_digits <= 9):
            raise InputError("scale_digits must be an integer in [0, 9]")


def quantize(value: float, quant: QuantizationSpec = QuantizationSpec()) -> int:
    """Round ``value`` half away from zero to ``scale_digits`` decimals, as an integer.

    Rounding is done on the shortest decimal representation of the float,
    so ``quantize(-1.25, s=1) == -13`` and ``quantize(2.675, s=2) == 268``.
    """
    value = float(value)
    if not math.isfinite(value):
        raise InputError(f"cannot quantize non-finite value {value!r}")
    return quantize_text(repr(value), quant)


def quantize_text(text: str, quant: QuantizationSpec = QuantizationSpec()) -> int:
    """Like ``quantize`` but from decimal text, with no float in between."""
    try:
        d = Decimal(text.strip())
    except InvalidOperation:
        raise InputError(f"not a decimal number: {text!r}") from None
    if not d.is_finite():
        raise InputError(f"cannot quantize non-finite value {text!r}")
    q = int(d.scaleb(quant.scale_digits).to_integral_value(rounding=ROUND_HALF_UP))
    if not INT64_MIN <= q <= INT64_MAX:
        raise QuantizationError(f"{text} overflows signed 64-bit at scale {quant.scale_digits}")
    return q


def dequantize(value_q: int, quant: QuantizationSpec = QuantizationSpec()) -> float:
    return value_q / 10 ** quant.scale_digits


def format_quantized(value_q: int, quant: QuantizationSpec = QuantizationSpec()) -> str:
    """Exact decimal text for a quantized value, e.g. ``206563 -> '20.6563'``."""
    s = quant.scale_digits
    sign = "-" if value_q < 0 else ""
    digits = str(abs(value_q)).rjust(s + 1, "0")
    if s == 0:
        return sign + digits
    return f"{sign}{digits[:-s]}.{digits[-s:]}"


@dataclass(frozen=True)
class SensorReading:
    sensor_id: int
    timestamp: int
    value_q: int
    status: Status = Status.OK

    def value(self, quant: QuantizationSpec = QuantizationSpec()) -> float:
        return dequantize(self.value_q, quant)


@dataclass(frozen=True)
class AggMeta:
    count: int
    variance: float


@dataclass(frozen=True)
class BaselineSample:
    """Plaintext reading sent during the baseline phase (raw wire format)."""

    sensor_id: int
    seq: int
    timestamp: int
    value_q: int
    status: Status = Status.OK


@dataclass(frozen=True)
class ObfuscatedPacket:
    sensor_id: int
    seq: int
    timestamp: int
    residual_q: int
    status: Status = Status.OK
    agg_meta: Optional[AggMeta] = None


@dataclass
class CodecSession:
    """Mutable per-sensor, per-side codec state.

    A session must be driven by one thread at a time.
    """

    side: Side
    sensor_id: int
    quant: QuantizationSpec = field(default_factory=QuantizationSpec)
    baseline_n: int = DEFAULT_BASELINE_N
    meta_every: int = DEFAULT_META_EVERY
    phase: Phase = Phase.BASELINE
    baseline: RunningAggregate = field(default_factory=aggregate_init)
    stream: RunningAggregate = field(default_factory=aggregate_init)
    last_value_q: int = 0
    last_timestamp: Optional[int] = None
    next_seq: int = 0
    obfuscated_sent: int = 0
    # seq -> residual of recently committed packets, for duplicate triage
    recent: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.baseline_n < 1:
            raise InputError("baseline_n must be at least 1")
        if self.meta_every < 0:
            raise InputError("meta_every must be non-negative")


def new_session(side: Side, sensor_id: int, quant: QuantizationSpec = QuantizationSpec(),
                baseline_n: int = DEFAULT_BASELINE_N,
                meta_every: int = DEFAULT_META_EVERY) -> CodecSession:
    return CodecSession(side, sensor_id, quant, baseline_n, meta_every)


def _check_int64(value: int, what: str) -> None:
    if not INT64_MIN <= value <= INT64_MAX:
        raise QuantizationError(f"{what} {value} does not fit signed 64-bit")


def encode_reading(session: CodecSession,
                   reading: SensorReading) -> Union[BaselineSample, ObfuscatedPacket]:
    """Agent side: turn one reading into the next outbound message."""
    if session.side is not Side.AGENT:
        raise InputError("encode_reading needs an agent session")
    if reading.sensor_id != session.sensor_id:
        raise InputError(f"reading for sensor {reading.sensor_id} on session {session.sensor_id}")
    if session.last_timestamp is not None and reading.timestamp <= session.last_timestamp:
        raise InputError(
            f"out-of-order timestamp {reading.timestamp} <= {session.last_timestamp}")
    _check_int64(reading.value_q, "value_q")

    seq = session.next_seq
    if session.phase is Phase.BASELINE:
        value = dequantize(reading.value_q, session.quant)
        session.baseline = aggregate_update(session.baseline, value)
        session.stream = aggregate_update(session.stream, value)
        out = BaselineSample(reading.sensor_id, seq, reading.timestamp, reading.value_q,
                             reading.status)
        if session.baseline.count >= session.baseline_n:
            session.phase = Phase.OBFUSCATED
    else:
        residual = reading.value_q - session.last_value_q
        _check_int64(residual, "residual")
        session.stream = aggregate_update(session.stream,
                                          dequantize(reading.value_q, session.quant))
        session.obfuscated_sent += 1
        meta = None
        if session.meta_every and session.obfuscated_sent % session.meta_every == 0:
            meta = AggMeta(session.stream.count, session.stream.variance())
        out = ObfuscatedPacket(reading.sensor_id, seq, reading.timestamp, residual,
                               reading.status, meta)
    session.last_value_q = reading.value_q
    session.last_timestamp = reading.timestamp
    session.next_seq = seq + 1
    return out


def _check_seq(session: CodecSession, seq: int) -> None:
    if seq < session.next_seq:
        raise ReplayError(f"replayed seq {seq}, expected {session.next_seq}",
                          session.next_seq, seq)
    if seq > session.next_seq:
        raise DesyncError(f"sequence gap: expected {session.next_seq}, got {seq}",
                          session.next_seq, seq)


def accept_baseline(session: CodecSession, sample: BaselineSample) -> SensorReading:
    """Manager side: absorb one plaintext baseline sample."""
    if session.side is not Side.MANAGER:
        raise InputError("accept_baseline needs a manager session")
    if session.phase is not Phase.BASELINE:
        raise InputError("baseline sample received outside the baseline phase")
    _check_seq(session, sample.seq)
    if session.last_timestamp is not None and sample.timestamp <= session.last_timestamp:
        raise InputError("non-increasing timestamp in baseline stream")
    value = dequantize(sample.value_q, session.quant)
    session.baseline = aggregate_update(session.baseline, value)
    session.stream = aggregate_update(session.stream, value)
    session.last_value_q = sample.value_q
    session.last_timestamp = sample.timestamp
    session.next_seq = sample.seq + 1
    if session.baseline.count >= session.baseline_n:
        session.phase = Phase.OBFUSCATED
    return SensorReading(sample.sensor_id, sample.timestamp, sample.value_q, sample.status)


def peek_packet(session: CodecSession, packet: ObfuscatedPacket) -> SensorReading:
    """Reconstruct the reading a packet carries without advancing the session."""
    if session.side is not Side.MANAGER:
        raise InputError("decoding needs a manager session")
    if session.phase is not Phase.OBFUSCATED:
        raise InputError("data packet received before the baseline completed")
    _check_seq(session, packet.seq)
    if session.last_timestamp is not None and packet.timestamp <= session.last_timestamp:
        raise InputError("non-increasing timestamp in data stream")
    value_q = session.last_value_q + packet.residual_q
    _check_int64(value_q, "reconstructed value_q")
    return SensorReading(packet.sensor_id, packet.timestamp, value_q, packet.status)


_RECENT_LIMIT = 64


def commit_packet(session: CodecSession, packet: ObfuscatedPacket,
                  reading: SensorReading) -> None:
    session.last_value_q = reading.value_q
    session.last_timestamp = reading.timestamp
    session.next_seq = packet.seq + 1
    session.stream = aggregate_update(session.stream, dequantize(reading.value_q, session.quant))
    session.recent[packet.seq] = packet.residual_q
    if len(session.recent) > _RECENT_LIMIT:
        del session.recent[min(session.recent)]


def decode_packet(session: CodecSession, packet: ObfuscatedPacket) -> SensorReading:
    """Manager side: reconstruct and commit one in-order packet.

    Raises DesyncError on a sequence gap and ReplayError on a consumed seq;
    in both cases the session is left untouched.
    """
    reading = peek_packet(session, packet)
    commit_packet(session, packet, reading)
    return reading


def reconstruct_paper_literal(variance: float, mean: float) -> float:
    """Return ``variance + mean``.

    This is the closed-form "original value" formula taken literally. It is
    kept for comparison only: it gives one number for the whole stream and
    cannot recover individual readings, which is why the codec reconstructs
    from residuals instead.
    """
    return variance + mean


# ---------------------------------------------------------------- wire format

_HEADER = struct.Struct("<IIQB")
_RAW_VALUE = struct.Struct("<d")
_META = struct.Struct("<Id")
META_FLAG = 0x01

HEADER_SIZE = _HEADER.size            # 17
RAW_FRAME_SIZE = HEADER_SIZE + 8      # 25
META_SIZE = 1 + _META.size            # 13


def zigzag_encode(n: int) -> int:
    return (n << 1) if n >= 0 else ((-n) << 1) - 1


def zigzag_decode(z: int) -> int:
    return (z >> 1) ^ -(z & 1)


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise InputError(f"varint cannot encode negative value {value}")
    out = bytearray()
    while value > 0x7F:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)
    return bytes(out)


def decode_varint(data: bytes, offset: int = 0) -> tuple[int, int]:
    """Return ``(value, new_offset)``."""
    result = 0
    shift = 0
    while True:
        if offset >= len(data):
            raise InputError("truncated varint")
        byte = data[offset]
        offset += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, offset
        shift += 7
        if shift > 63:
            raise InputError("varint longer than 10 bytes")


def varint_size(value: int) -> int:
    size = 1
    while value > 0x7F:
        value >>= 7
        size += 1
    return size


def _header(sensor_id: int, seq: int, timestamp: int, status: Status) -> bytes:
    try:
        return _HEADER.pack(sensor_id, seq, timestamp, int(status))
    except struct.error as exc:
        raise InputError(f"header field out of range: {exc}") from exc


def encode_raw_frame(msg: Union[BaselineSample, SensorReading], seq: Optional[int] = None,
                     quant: QuantizationSpec = QuantizationSpec()) -> bytes:
    """Header followed by the dequantized value as f64."""
    if seq is None:
        seq = msg.seq
    return _header(msg.sensor_id, seq, msg.timestamp, msg.status) + \
        _RAW_VALUE.pack(dequantize(msg.value_q, quant))


def decode_raw_frame(data: bytes, quant: QuantizationSpec = QuantizationSpec()) -> BaselineSample:
    if len(data) != RAW_FRAME_SIZE:
        raise InputError(f"raw frame must be {RAW_FRAME_SIZE} bytes, got {len(data)}")
    sensor_id, seq, timestamp, status = _HEADER.unpack_from(data)
    (value,) = _RAW_VALUE.unpack_from(data, HEADER_SIZE)
    return BaselineSample(sensor_id, seq, timestamp, quantize(value, quant), Status(status))


def encode_packet_frame(packet: ObfuscatedPacket) -> bytes:
    out = _header(packet.sensor_id, packet.seq, packet.timestamp, packet.status)
    out += encode_varint(zigzag_encode(packet.residual_q))
    if packet.agg_meta is not None:
        out += bytes([META_FLAG]) + _META.pack(packet.agg_meta.count, packet.agg_meta.variance)
    return out


def decode_packet_frame(data: bytes) -> ObfuscatedPacket:
    if len(data) < HEADER_SIZE + 1:
        raise InputError("packet frame too short")
    sensor_id, seq, timestamp, status = _HEADER.unpack_from(data)
    zz, offset = decode_varint(data, HEADER_SIZE)
    meta = None
    rest = len(data) - offset
    if rest:
        if rest != META_SIZE or data[offset] != META_FLAG:
            raise InputError("malformed aggregate metadata trailer")
        count, variance = _META.unpack_from(data, offset + 1)
        meta = AggMeta(count, variance)
    return ObfuscatedPacket(sensor_id, seq, timestamp, zigzag_decode(zz), Status(status), meta)


def frame_size(msg: Union[BaselineSample, ObfuscatedPacket]) -> int:
    """On-wire size in bytes, without building the frame."""
    if isinstance(msg, BaselineSample):
        return RAW_FRAME_SIZE
    size = HEADER_SIZE + varint_size(zigzag_encode(msg.residual_q))
    if msg.agg_meta is not None:
        size += META_SIZE
    return size


def payload_size(msg: Union[BaselineSample, ObfuscatedPacket]) -> int:
    """Bytes after the header: 8 for a raw value, varint (+ trailer) for a packet."""
    return frame_size(msg) - HEADER_SIZE


# ---------------------------------------------------------------- dump files
#
# file   = b"ISFD" | version u8 | scale_digits u8 | baseline_n u16 | record*
# record = kind u8 (0 raw, 1 packet) | length u16 | frame

DUMP_MAGIC = b"ISFD"
DUMP_VERSION = 1
_DUMP_HEADER = struct.Struct("<4sBBH")
_RECORD = struct.Struct("<BH")
KIND_RAW = 0
KIND_PACKET = 1


def write_dump(stream: BinaryIO, messages, quant: QuantizationSpec = QuantizationSpec(),
               baseline_n: int = DEFAULT_BASELINE_N) -> int:
    """Write messages to a dump file; returns the number of records."""
    stream.write(_DUMP_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, quant.scale_digits, baseline_n))
    count = 0
    for msg in messages:
        if isinstance(msg, BaselineSample):
            kind, frame = KIND_RAW, encode_raw_frame(msg, quant=quant)
        else:
            kind, frame = KIND_PACKET, encode_packet_frame(msg)
        stream.write(_RECORD.pack(kind, len(frame)) + frame)
        count += 1
    return count


def read_dump(stream: BinaryIO) -> tuple[QuantizationSpec, int, list]:
    head = stream.read(_DUMP_HEADER.size)
    if len(head) != _DUMP_HEADER.size:
        raise InputError("dump file too short")
    magic, version, scale, baseline_n = _DUMP_HEADER.unpack(head)
    if magic != DUMP_MAGIC or version != DUMP_VERSION:
        raise InputError("not an isf packet dump")
    quant = QuantizationSpec(scale)
    return quant, baseline_n, list(_iter_records(stream, quant))


def _iter_records(stream: BinaryIO, quant: QuantizationSpec) -> Iterator:
    while True:
        head = stream.read(_RECORD.size)
        if not head:
            return
        if len(head) != _RECORD.size:
            raise InputError("truncated record header")
        kind, length = _RECORD.unpack(head)
        frame = stream.read(length)
        if len(frame) != length:
            raise InputError("truncated record")
        if kind == KIND_RAW:
            yield decode_raw_frame(frame, quant)
        elif kind == KIND_PACKET:
            yield decode_packet_frame(frame)
        else:
            raise InputError(f"unknown record kind {kind}")


def with_residual(packet: ObfuscatedPacket, residual_q: int) -> ObfuscatedPacket:
    return replace(packet, residual_q=residual_q)
