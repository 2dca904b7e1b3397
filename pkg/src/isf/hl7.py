"""
HL7 v2 ORU^R01 rendering of obfuscated packets (ER7, plus a one-way XML view).

Layout fixed by ``MessageProfile`` (field numbers are HL7 1-based)::

    MSH|^~\\&|<app>|<facility>|<rcv app>|<rcv facility>|<DTM>||ORU^R01^ORU_R01|ISF<sid>-<seq>|P|2.5
    [PID|1||<patient id>]
    OBR|1|<sensor_id>^ISF|<seq>|ISF-STREAM^Obfuscated sensor stream^L|||<DTM>
    OBX|1|NM|ISF-RES^Residual^L||<residual_q>|ISF-RESIDUAL||<status>|||F
    OBX|n|NM|ISF-AGG-N^Sample count^L||<count>|{count}|||||F         packet agg_meta
    OBX|n|NM|ISF-AGG-VAR^Sample variance^L||<variance>|{var}|||||F
    OBX|n|NM|ISF-N ... / ISF-VAR ... / ISF-MEAN ...                  ObservationMeta

Segments end with CR. Only the residual and statistics are carried, never a
reconstructed reading.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from decimal import Decimal
from typing import Optional
from xml.etree import ElementTree as ET

from .codec import AggMeta, ObfuscatedPacket, Status
from .errors import Hl7FieldError, Hl7ParseError, InputError

SEGMENT_SEP = "\r"
FIELD_SEP = "|"
ENCODING_CHARS = "^~\\&"

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)
# 9999-12-31T23:59:59.999Z, the last instant a four-digit DTM year can show
MAX_TIMESTAMP_MS = 253402300799999
_NUMERIC = re.compile(r"^[+-]?\d+(\.\d+)?$")
_INTEGER = re.compile(r"^[+-]?\d+$")


@dataclass(frozen=True)
class MessageProfile:
    sending_application: str = "ISF-AGENT"
    sending_facility: str = "PHD-CLUSTER"
    receiving_application: str = "ISF-MANAGER"
    receiving_facility: str = "HIS"
    version: str = "2.5"
    processing_id: str = "P"
    include_pid: bool = False
    patient_id: str = ""


DEFAULT_PROFILE = MessageProfile()

RESIDUAL_ID = "ISF-RES"
RESIDUAL_UNITS = "ISF-RESIDUAL"
AGG_COUNT_ID = "ISF-AGG-N"
AGG_VAR_ID = "ISF-AGG-VAR"
META_COUNT_ID = "ISF-N"
META_VAR_ID = "ISF-VAR"
META_MEAN_ID = "ISF-MEAN"

_OBX_LABELS = {
    RESIDUAL_ID: "Residual",
    AGG_COUNT_ID: "Sample count",
    AGG_VAR_ID: "Sample variance",
    META_COUNT_ID: "Baseline count",
    META_VAR_ID: "Baseline variance",
    META_MEAN_ID: "Baseline mean",
}


@dataclass(frozen=True)
class ObservationMeta:
    sample_count: int
    variance: float
    baseline_mean: Optional[float] = None

    def __post_init__(self):
        if self.sample_count < 0 or not self.variance >= 0:
            raise ValueError("sample_count and variance must be non-negative")


@dataclass
class Segment:
    """One segment; ``fields[n - 1]`` is field n. For MSH, field 1 is the separator."""

    name: str
    fields: list = field(default_factory=list)

    def get(self, n: int) -> str:
        return self.fields[n - 1] if 0 < n <= len(self.fields) else ""


@dataclass
class Hl7Message:
    segments: list = field(default_factory=list)
    encoding_chars: str = ENCODING_CHARS

    @property
    def control_id(self) -> str:
        return self.segments[0].get(10) if self.segments else ""

    def find(self, name: str) -> list:
        return [s for s in self.segments if s.name == name]

    def to_er7(self) -> str:
        out = []
        for seg in self.segments:
            if seg.name == "MSH":
                out.append("MSH" + FIELD_SEP + FIELD_SEP.join(seg.fields[1:]))
            else:
                out.append(FIELD_SEP.join([seg.name] + list(seg.fields)))
        return SEGMENT_SEP.join(out) + SEGMENT_SEP


# ------------------------------------------------------------------ escaping

_ESCAPES = {"\\": "\\E\\", "|": "\\F\\", "^": "\\S\\", "~": "\\R\\", "&": "\\T\\"}
_UNESCAPES = {v[1]: k for k, v in _ESCAPES.items()}


def escape(text: str) -> str:
    return "".join(_ESCAPES.get(ch, ch) for ch in text)


def unescape(text: str) -> str:
    return re.sub(r"\\([EFSRT])\\", lambda m: _UNESCAPES[m.group(1)], text)


# ----------------------------------------------------------------- formatting

def format_dtm(timestamp_ms: int) -> str:
    if not 0 <= timestamp_ms <= MAX_TIMESTAMP_MS:
        raise InputError(f"timestamp {timestamp_ms} outside the HL7 DTM range")
    dt = _EPOCH + timedelta(milliseconds=timestamp_ms)
    return dt.strftime("%Y%m%d%H%M%S") + f".{dt.microsecond // 1000:03d}+0000"


def parse_dtm(text: str) -> int:
    try:
        dt = datetime.strptime(text, "%Y%m%d%H%M%S.%f%z")
    except ValueError as exc:
        raise ValueError(f"bad timestamp {text!r}") from exc
    return (dt - _EPOCH) // timedelta(milliseconds=1)


def format_number(x: float) -> str:
    """Positional decimal text that parses back to the same float (no exponent)."""
    x = float(x)
    if not math.isfinite(x):
        raise InputError(f"cannot render non-finite number {x!r}")
    return format(Decimal(repr(x)), "f")


def _obx(set_id: int, ident: str, value: str, units: str = "", flags: str = "") -> Segment:
    observation = f"{ident}^{escape(_OBX_LABELS[ident])}^L"
    return Segment("OBX", [str(set_id), "NM", observation, "", value, units, "", flags,
                           "", "", "F"])


def build_oru(packet: ObfuscatedPacket, meta: Optional[ObservationMeta] = None,
              profile: MessageProfile = DEFAULT_PROFILE) -> Hl7Message:
    ts = format_dtm(packet.timestamp)
    msh = Segment("MSH", [
        FIELD_SEP, ENCODING_CHARS,
        escape(profile.sending_application), escape(profile.sending_facility),
        escape(profile.receiving_application), escape(profile.receiving_facility),
        ts, "", "ORU^R01^ORU_R01", f"ISF{packet.sensor_id}-{packet.seq}",
        escape(profile.processing_id), escape(profile.version),
    ])
    segments = [msh]
    if profile.include_pid:
        segments.append(Segment("PID", ["1", "", escape(profile.patient_id)]))
    segments.append(Segment("OBR", [
        "1", f"{packet.sensor_id}^ISF", str(packet.seq),
        "ISF-STREAM^Obfuscated sensor stream^L", "", "", ts,
    ]))
    obx = [_obx(1, RESIDUAL_ID, str(packet.residual_q), RESIDUAL_UNITS, packet.status.name)]
    if packet.agg_meta is not None:
        obx.append(_obx(len(obx) + 1, AGG_COUNT_ID, str(packet.agg_meta.count), "{count}"))
        obx.append(_obx(len(obx) + 1, AGG_VAR_ID, format_number(packet.agg_meta.variance)))
    if meta is not None:
        obx.append(_obx(len(obx) + 1, META_COUNT_ID, str(meta.sample_count), "{count}"))
        obx.append(_obx(len(obx) + 1, META_VAR_ID, format_number(meta.variance)))
        if meta.baseline_mean is not None:
            obx.append(_obx(len(obx) + 1, META_MEAN_ID, format_number(meta.baseline_mean)))
    return Hl7Message(segments + obx)


def to_oru(packet: ObfuscatedPacket, meta: Optional[ObservationMeta] = None,
           profile: MessageProfile = DEFAULT_PROFILE) -> str:
    return build_oru(packet, meta, profile).to_er7()


# -------------------------------------------------------------------- parsing

def parse_er7(text: str) -> Hl7Message:
    lines = [ln for ln in re.split(r"\r\n|\r|\n", text) if ln]
    if not lines or not lines[0].startswith("MSH") or len(lines[0]) < 8:
        raise Hl7ParseError("message must start with an MSH segment")
    sep = lines[0][3]
    encoding = lines[0][4:8]
    segments = []
    for line in lines:
        parts = line.split(sep)
        name = parts[0]
        if not re.fullmatch(r"[A-Z][A-Z0-9]{2}", name):
            raise Hl7ParseError(f"bad segment name {name!r}")
        if name == "MSH":
            segments.append(Segment("MSH", [sep] + parts[1:]))
        else:
            segments.append(Segment(name, parts[1:]))
    return Hl7Message(segments, encoding)


def _int_field(seg: Segment, index: int, n: int, text: str) -> int:
    if not _INTEGER.match(text):
        raise Hl7FieldError(seg.name, index, n, f"expected an integer, got {text!r}")
    return int(text)


def _num_field(seg: Segment, index: int, n: int, text: str) -> float:
    if not _NUMERIC.match(text):
        raise Hl7FieldError(seg.name, index, n, f"expected a number, got {text!r}")
    return float(text)


def parse_oru(text: str) -> tuple[ObfuscatedPacket, Optional[ObservationMeta]]:
    """Inverse of ``to_oru``. Segments other than MSH/OBR/OBX are ignored."""
    msg = parse_er7(text)
    obrs = msg.find("OBR")
    if not obrs:
        raise Hl7ParseError("ORU message has no OBR segment")
    obr = obrs[0]
    sensor_text = obr.get(2).split("^")[0]
    sensor_id = _int_field(obr, 1, 2, sensor_text)
    seq = _int_field(obr, 1, 3, obr.get(3))
    try:
        timestamp = parse_dtm(obr.get(7))
    except ValueError as exc:
        raise Hl7FieldError("OBR", 1, 7, str(exc)) from None

    values: dict[str, tuple[Segment, int, str]] = {}
    status = Status.OK
    for index, obx in enumerate(msg.find("OBX"), start=1):
        ident = obx.get(3).split("^")[0]
        if ident in values:
            raise Hl7FieldError("OBX", index, 3, f"duplicate observation {ident}")
        values[ident] = (obx, index, obx.get(5))
        if ident == RESIDUAL_ID:
            flag = obx.get(8)
            try:
                status = Status[flag] if flag else Status.OK
            except KeyError:
                raise Hl7FieldError("OBX", index, 8, f"unknown status {flag!r}") from None

    if RESIDUAL_ID not in values:
        raise Hl7ParseError("no residual observation (OBX ISF-RES)")

    def get_int(ident):
        seg, index, text = values[ident]
        return _int_field(seg, index, 5, text)

    def get_num(ident):
        seg, index, text = values[ident]
        return _num_field(seg, index, 5, text)

    residual = get_int(RESIDUAL_ID)
    agg = None
    if AGG_COUNT_ID in values or AGG_VAR_ID in values:
        if not (AGG_COUNT_ID in values and AGG_VAR_ID in values):
            raise Hl7ParseError("aggregate metadata needs both count and variance")
        agg = AggMeta(get_int(AGG_COUNT_ID), get_num(AGG_VAR_ID))
    meta = None
    if META_COUNT_ID in values or META_VAR_ID in values:
        if not (META_COUNT_ID in values and META_VAR_ID in values):
            raise Hl7ParseError("observation metadata needs both count and variance")
        mean = get_num(META_MEAN_ID) if META_MEAN_ID in values else None
        meta = ObservationMeta(get_int(META_COUNT_ID), get_num(META_VAR_ID), mean)
    packet = ObfuscatedPacket(sensor_id, seq, timestamp, residual, status, agg)
    return packet, meta


# ------------------------------------------------------------------------ XML

def render_xml(msg: Hl7Message) -> str:
    """One XML document: an element per segment, and per field inside it."""
    root = ET.Element("HL7Message")
    for seg in msg.segments:
        el = ET.SubElement(root, seg.name)
        for n, value in enumerate(seg.fields, start=1):
            ET.SubElement(el, f"{seg.name}.{n}").text = value
    body = ET.tostring(root, encoding="unicode", short_empty_elements=True)
    return '<?xml version="1.0" encoding="UTF-8"?>' + body
