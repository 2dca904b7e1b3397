from __future__ import annotations

import math

import pytest

from isf.codec import QuantizationSpec, SensorReading, Status, quantize
from isf.traces import TraceKind, TraceSpec, generate

TEMP_MEAN = 20.65627
TEMP_VAR = 0.00233
TEMP_STD = math.sqrt(TEMP_VAR)


def temperature_spec(seed: int = 1, n: int = 1400) -> TraceSpec:
    return TraceSpec(kind=TraceKind.TEMPERATURE, n_samples=n, mean=TEMP_MEAN,
                     variance=TEMP_VAR, seed=seed)


def readings_from_values(values, sensor_id: int = 1, period_ms: int = 1000,
                         quant: QuantizationSpec = QuantizationSpec()) -> list[SensorReading]:
    return [SensorReading(sensor_id, i * period_ms, quantize(v, quant), Status.OK)
            for i, v in enumerate(values)]


@pytest.fixture(scope="session")
def temperature_trace():
    return generate(temperature_spec())


# criterion number -> "PASS/FAIL ..." line, filled by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
