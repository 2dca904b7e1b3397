from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from isf.codec import (AggMeta, ObfuscatedPacket, SensorReading, Status, format_quantized)
from isf.errors import Hl7FieldError, Hl7ParseError, InputError
from isf.hl7 import (MAX_TIMESTAMP_MS, Hl7Message, MessageProfile, ObservationMeta, Segment,
                     build_oru, escape, format_dtm, format_number, parse_dtm, parse_er7,
                     parse_oru, render_xml, to_oru, unescape)
from isf.protocol import run_session

DATA = Path(__file__).parent / "data"

u32 = st.integers(0, 2**32 - 1)
nonneg = st.floats(0, 1e12, allow_nan=False, allow_infinity=False)
metas = st.none() | st.builds(AggMeta, u32, nonneg)
packets = st.builds(ObfuscatedPacket, u32, u32, st.integers(0, MAX_TIMESTAMP_MS),
                    st.integers(-(2**63), 2**63 - 1), st.sampled_from(list(Status)), metas)
obs = st.none() | st.builds(ObservationMeta, st.integers(0, 2**31), nonneg,
                            st.none() | st.floats(-1e9, 1e9, allow_nan=False))


def test_zero_residual_obx():
    text = to_oru(ObfuscatedPacket(7, 12, 1000, 0))
    obx = [seg for seg in text.split("\r") if seg.startswith("OBX")]
    assert len(obx) == 1
    fields = obx[0].split("|")
    assert fields[1] == "1" and fields[2] == "NM"
    assert fields[5] == "0" and fields[6] == "ISF-RESIDUAL"
    assert text.startswith("MSH|^~\\&|") and text.endswith("\r")
    assert "ORU^R01" in text


def test_variance_carried_verbatim():
    text = to_oru(ObfuscatedPacket(7, 12, 1000, 4, Status.OK, AggMeta(50, 0.00233)))
    assert "|0.00233|" in text
    assert "|50|{count}|" in text


def test_round_trip_examples():
    p = ObfuscatedPacket(7, 12, 1000, 0)
    assert parse_oru(to_oru(p)) == (p, None)
    m = ObservationMeta(50, 0.00233, 20.65627)
    assert parse_oru(to_oru(p, m)) == (p, m)


def test_extra_segment_ignored():
    p = ObfuscatedPacket(7, 12, 1000, -3)
    text = to_oru(p) + "NTE|1||free text\r"
    assert parse_oru(text) == (p, None)
    assert parse_er7(text).find("NTE")[0].get(3) == "free text"


def test_parse_errors():
    with pytest.raises(Hl7ParseError):
        parse_oru("OBR|1|7^ISF|12\r")
    with pytest.raises(Hl7ParseError):
        parse_oru("")
    bad = to_oru(ObfuscatedPacket(7, 12, 1000, 0)).replace("||0|ISF-RESIDUAL", "||zero|ISF-RESIDUAL")
    with pytest.raises(Hl7FieldError) as exc:
        parse_oru(bad)
    assert (exc.value.segment, exc.value.index, exc.value.field) == ("OBX", 1, 5)
    assert str(exc.value).startswith("OBX[1].5")
    bad_var = to_oru(ObfuscatedPacket(7, 12, 1000, 0, Status.OK, AggMeta(5, 0.5)))
    with pytest.raises(Hl7FieldError) as exc:
        parse_oru(bad_var.replace("|0.5|", "|1e-3|"))
    assert exc.value.index == 3


def test_set_ids_increment():
    msg = build_oru(ObfuscatedPacket(1, 1, 1, 1, Status.OK, AggMeta(2, 0.1)),
                    ObservationMeta(3, 0.2, 1.0))
    assert msg.segments[0].name == "MSH"
    assert [s.get(1) for s in msg.find("OBX")] == ["1", "2", "3", "4", "5", "6"]


def test_control_id_from_sensor_and_seq():
    assert build_oru(ObfuscatedPacket(9, 41, 5, 0)).control_id == "ISF9-41"


@pytest.mark.parametrize("name", ["oru_zero_residual.er7", "oru_agg_meta.er7",
                                  "oru_handshake_meta.er7"])
def test_golden_fixtures_stable(name):
    golden = (DATA / name).read_bytes()
    packet, meta = parse_oru(golden.decode("utf-8"))
    profile = MessageProfile(include_pid=b"PID|" in golden, patient_id="BED|7")
    assert to_oru(packet, meta, profile).encode("utf-8") == golden


def test_escape_round_trip():
    raw = "a|b^c~d\\e&f"
    assert escape(raw) == "a\\F\\b\\S\\c\\R\\d\\E\\e\\T\\f"
    assert unescape(escape(raw)) == raw


@given(st.text(alphabet="ab|^~\\&", max_size=20))
def test_escape_is_invertible(text):
    assert unescape(escape(text)) == text


def test_dtm():
    assert format_dtm(0) == "19700101000000.000+0000"
    assert format_dtm(1_700_000_000_123) == "20231114221320.123+0000"
    assert parse_dtm("20231114221320.123+0000") == 1_700_000_000_123
    with pytest.raises(InputError):
        format_dtm(MAX_TIMESTAMP_MS + 1)


def test_number_text_has_no_exponent():
    assert format_number(1e-7) == "0.0000001"
    assert format_number(1e20) == "100000000000000000000"
    assert float(format_number(0.1 + 0.2)) == 0.1 + 0.2


@given(packets, obs)
def test_round_trip_property(packet, meta):
    assert parse_oru(to_oru(packet, meta)) == (packet, meta)


def test_round_trip_1000_random_packets():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        meta = None
        if rng.random() < 0.5:
            meta = AggMeta(int(rng.integers(0, 2**32)), float(rng.exponential(0.01)))
        p = ObfuscatedPacket(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)),
                             int(rng.integers(0, MAX_TIMESTAMP_MS)),
                             int(rng.integers(-(2**62), 2**62)),
                             Status(int(rng.integers(0, 3))), meta)
        assert parse_oru(to_oru(p)) == (p, None)


def test_deterministic_bytes():
    p = ObfuscatedPacket(1, 2, 3, 4, Status.OK, AggMeta(5, 0.25))
    assert to_oru(p) == to_oru(p)
    assert render_xml(build_oru(p)) == render_xml(build_oru(p))


def test_xml_structure():
    msh_only = Hl7Message([Segment("MSH", ["|", "^~\\&", "APP"])])
    xml = render_xml(msh_only)
    assert xml.count("<MSH>") == 1 and "<MSH.3>APP</MSH.3>" in xml
    msg = build_oru(ObfuscatedPacket(1, 2, 3, 4, Status.OK, AggMeta(5, 0.25)))
    xml = render_xml(msg)
    assert xml.count("<OBX>") == 3
    assert xml.index("<OBR>") < xml.index("<OBX>")
    ids = [chunk.split("</OBX.1>")[0] for chunk in xml.split("<OBX.1>")[1:]]
    assert ids == ["1", "2", "3"]


def test_no_absolute_value_in_obfuscated_messages(temperature_trace):
    log = run_session(temperature_trace)
    truth = {r.timestamp: r for r in temperature_trace}
    packets = [m for m in log.sent if isinstance(m, ObfuscatedPacket)]
    assert packets
    for p in packets:
        text = to_oru(p)
        value = truth[p.timestamp]
        assert format_quantized(value.value_q) not in text
        assert repr(value.value()) not in text
