from __future__ import annotations

import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isf.codec import SensorReading, Status
from isf.errors import ConfigError, InputError
from isf.stats import aggregate_of
from isf.traces import (POSTURES, TraceKind, TraceSpec, gen_pressure_matrix, gen_temperature,
                        generate, poisson_arrivals, posture_mask, read_trace_csv,
                        trace_to_csv)

from conftest import TEMP_MEAN, TEMP_VAR, temperature_spec


def test_temperature_matches_parameters():
    trace = gen_temperature(temperature_spec(seed=1))
    assert len(trace) == 1400
    agg = aggregate_of(r.value() for r in trace)
    assert abs(agg.mean - TEMP_MEAN) <= 0.01
    assert abs(agg.variance() - TEMP_VAR) <= 0.2 * TEMP_VAR


def test_zero_variance_is_constant():
    trace = gen_temperature(TraceSpec(n_samples=30, mean=TEMP_MEAN, variance=0.0))
    assert {r.value_q for r in trace} == {206563}


def test_negative_variance_rejected():
    with pytest.raises((InputError, ConfigError)):
        gen_temperature(TraceSpec(variance=-1.0))


def test_same_seed_same_trace():
    assert generate(temperature_spec(seed=4)) == generate(temperature_spec(seed=4))
    assert generate(temperature_spec(seed=4)) != generate(temperature_spec(seed=5))


def test_periodic_timestamps():
    trace = gen_temperature(TraceSpec(n_samples=5, period_ms=250, start_ms=10))
    assert [r.timestamp for r in trace] == [10, 260, 510, 760, 1010]


@given(st.integers(0, 10**6), st.integers(1, 2000))
@settings(max_examples=30)
def test_poisson_timestamps_strictly_increase(seed, period):
    spec = TraceSpec(n_samples=300, seed=seed, period_ms=period, arrivals="poisson")
    ts = [r.timestamp for r in generate(spec)]
    assert all(b > a for a, b in zip(ts, ts[1:]))


def test_poisson_count_and_mean_gap():
    times = poisson_arrivals(10.0, 1000.0, seed=5)
    assert abs(len(times) - 10_000) <= 500
    gaps = np.diff([0.0] + times)
    assert abs(gaps.mean() - 0.1) <= 0.05 * 0.1
    assert times == sorted(times)
    assert poisson_arrivals(10.0, 1000.0, seed=5) == times


def test_poisson_degenerate_inputs():
    assert poisson_arrivals(3.0, 0.0) == []
    with pytest.raises(InputError):
        poisson_arrivals(0.0, 10.0)


def test_matrix_has_25_sensors():
    spec = TraceSpec(kind=TraceKind.PRESSURE_MATRIX, n_samples=10, mean=5.0, variance=0.0)
    traces = gen_pressure_matrix(spec)
    assert sorted(traces) == list(range(25))
    assert all(len(t) == 10 for t in traces.values())


def test_static_patient_level_is_mask_weight():
    spec = TraceSpec(kind=TraceKind.PRESSURE_MATRIX, n_samples=20, mean=5.0, variance=1e-6)
    traces = gen_pressure_matrix(spec)
    mask = np.asarray(POSTURES["SUPINE"]).ravel()
    for sid, rs in traces.items():
        avg = sum(r.value() for r in rs) / len(rs)
        assert abs(avg - 5.0 * mask[sid]) <= 0.01
        assert all(r.status is Status.OK for r in rs)


def test_posture_change_moves_exactly_the_mask_difference():
    spec = TraceSpec(kind=TraceKind.PRESSURE_MATRIX, n_samples=10, mean=5.0, variance=0.0,
                     period_ms=1000)
    traces = gen_pressure_matrix(spec, [(4000, "LEFT_LATERAL")])
    diff = (np.asarray(POSTURES["LEFT_LATERAL"]) != np.asarray(POSTURES["SUPINE"])).ravel()
    for sid, rs in traces.items():
        before, after = rs[3], rs[4]
        assert (before.value_q != after.value_q) == bool(diff[sid])
        assert (after.status is Status.ALARM) == bool(diff[sid])
        assert all(r.status is Status.OK for r in rs[5:])


def test_unknown_posture():
    spec = TraceSpec(kind=TraceKind.PRESSURE_MATRIX, n_samples=3)
    with pytest.raises(InputError):
        gen_pressure_matrix(spec, [(0, "HANDSTAND")])
    with pytest.raises(InputError):
        posture_mask("HANDSTAND")
    with pytest.raises(ConfigError):
        TraceSpec.from_dict({"kind": "PRESSURE_MATRIX", "posture_events": [[0, "HANDSTAND"]]})


def test_posture_mask_resamples():
    m = posture_mask("SITTING", 10, 10)
    assert m.shape == (10, 10)
    assert m[4, 4] == POSTURES["SITTING"][2][2]


def test_ar_synth_is_autocorrelated():
    spec = TraceSpec(kind=TraceKind.AR_SYNTH, n_samples=2000, mean=0.0, variance=1.0,
                     ar_coeffs=(0.8,), seed=2, scale_digits=6)
    x = np.array([r.value() for r in generate(spec)])
    lag1 = np.corrcoef(x[:-1], x[1:])[0, 1]
    assert abs(lag1 - 0.8) <= 0.05


def test_spec_dict_round_trip_and_validation():
    spec = TraceSpec(kind=TraceKind.AR_SYNTH, ar_coeffs=(0.5, 0.1), posture_events=((5, "PRONE"),))
    assert TraceSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError) as exc:
        TraceSpec.from_dict({"n_samples": 0, "bogus": 1})
    assert ("bogus", "unknown field") in exc.value.errors
    with pytest.raises(ConfigError):
        TraceSpec.from_dict({"n_samples": "many"})
    with pytest.raises(ConfigError):
        TraceSpec.from_dict({"kind": "AR_SYNTH"})


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 2**31), st.integers(-(2**63), 2**63 - 1),
                          st.sampled_from(list(Status))), max_size=40),
       st.integers(0, 9))
def test_csv_round_trip_exact(rows, scale):
    from isf.codec import QuantizationSpec
    quant = QuantizationSpec(scale)
    readings = [SensorReading(sid, i, v, s) for i, (sid, v, s) in enumerate(rows)]
    text = trace_to_csv(readings, quant)
    assert text.splitlines()[0] == "timestamp_ms,sensor_id,value,status"
    assert read_trace_csv(io.StringIO(text), quant) == readings


def test_csv_requires_header():
    with pytest.raises(InputError):
        read_trace_csv(io.StringIO("0,1,2.0,OK\n"))
    with pytest.raises(InputError):
        read_trace_csv(io.StringIO("timestamp_ms,sensor_id,value,status\n0,1,abc,OK\n"))
