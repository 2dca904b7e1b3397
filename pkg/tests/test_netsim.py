from __future__ import annotations

import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isf.codec import (HEADER_SIZE, META_SIZE, RAW_FRAME_SIZE, BaselineSample, ObfuscatedPacket,
                       Side, encode_reading, new_session, quantize)
from isf.errors import ConfigError
from isf.netsim import (PAPER_CLAIM, REPORT_FIELDS, AttackerConfig, AttackMode, ChannelConfig,
                        InjectDistribution, ProtocolSettings, ScenarioConfig,
                        eavesdrop_reconstruct, eavesdrop_reconstruct_q, run_scenario, simulate,
                        traffic_report, with_seed)
from isf.protocol import SessionLog
from isf.traces import TraceSpec, generate

from conftest import temperature_spec
from replay_oracle import replay_mitm

REPLAY_KEYS = ("injected", "detected", "forged_accepted", "forged_dropped", "genuine_verified",
               "false_positives", "desyncs")


def scenario(**kw) -> ScenarioConfig:
    base = dict(name="t", seed=1, trace=temperature_spec(seed=1))
    base.update(kw)
    return ScenarioConfig(**base)


def mitm(seed=11, width=10.0, rate=10.0, k=4.0) -> ScenarioConfig:
    from isf.forecast import ToleranceConfig
    return scenario(seed=seed, trace=temperature_spec(seed=seed),
                    attacker=AttackerConfig(AttackMode.MITM_INJECT, 0, rate,
                                            InjectDistribution("uniform", width)),
                    tolerance=ToleranceConfig(k_sigma=k))


def test_constant_trace_lossless():
    cfg = scenario(trace=TraceSpec(n_samples=300, mean=20.0, variance=0.0))
    r = run_scenario(cfg)
    assert r.reconstruction_exact and r.reduction_ratio > 0
    assert r.committed == 300 and r.paper_claim == PAPER_CLAIM == 0.6675


def test_reduction_ratio_invariant():
    r = run_scenario(scenario())
    assert r.reduction_ratio == 1 - r.bytes_obfuscated / r.bytes_raw
    assert r.bytes_raw == 1400 * RAW_FRAME_SIZE


def test_zero_residual_closed_form():
    cfg = scenario(trace=TraceSpec(n_samples=1000, mean=20.0, variance=0.0))
    res = simulate(cfg)
    packets = [m for m in res.log.sent if isinstance(m, ObfuscatedPacket)]
    assert len(packets) == 950
    metas = sum(p.agg_meta is not None for p in packets)
    assert metas == 950 // 50
    expected = 50 * RAW_FRAME_SIZE + 950 * (HEADER_SIZE + 1) + metas * META_SIZE
    assert res.report.bytes_obfuscated == expected
    assert res.report.reduction_ratio == 1 - expected / 25_000


def test_empty_log_ratio_flagged():
    t = traffic_report(SessionLog())
    assert (t.bytes_raw, t.bytes_obfuscated, t.reduction_ratio, t.ratio_defined) == (0, 0, 0.0,
                                                                                   False)


def test_raw_mode_has_no_savings():
    r = run_scenario(scenario(protocol=ProtocolSettings(raw_mode=True)))
    assert r.reduction_ratio == 0.0 and r.reconstruction_exact


def test_deterministic_reports():
    cfg = scenario(channel=ChannelConfig(0.01, 5, 3, 4),
                   attacker=AttackerConfig(AttackMode.EAVESDROP, 90_000))
    a, b = simulate(cfg), simulate(cfg)
    assert a.report.to_json() == b.report.to_json()
    assert a.log.to_jsonl() == b.log.to_jsonl()


def test_seed_override():
    cfg = with_seed(scenario(), 99)
    assert (cfg.seed, cfg.trace.seed, cfg.channel.seed) == (99, 99, 99)


def test_csv_row_has_stable_columns():
    r = run_scenario(scenario(trace=temperature_spec(n=120)))
    row = r.csv_row()
    assert len(row) == len(REPORT_FIELDS)
    assert row[REPORT_FIELDS.index("attacker_rmse")] == ""
    assert list(json.loads(r.to_json())) == list(REPORT_FIELDS)


# ------------------------------------------------------------ eavesdropping

def _encode(trace, baseline_n=50):
    agent = new_session(Side.AGENT, trace[0].sensor_id, baseline_n=baseline_n)
    return [encode_reading(agent, r) for r in trace]


def test_eavesdrop_without_baseline_off_by_anchor(temperature_trace):
    msgs = _encode(temperature_trace)
    packets = [m for m in msgs if isinstance(m, ObfuscatedPacket)]
    v_base = msgs[49].value_q
    est = eavesdrop_reconstruct_q(packets, 0)
    truth = [r.value_q for r in temperature_trace[50:]]
    assert [e - t for e, t in zip(est, truth)] == [-v_base] * len(truth)


def test_eavesdrop_with_baseline_is_exact(temperature_trace):
    msgs = _encode(temperature_trace)
    packets = [m for m in msgs if isinstance(m, ObfuscatedPacket)]
    est = eavesdrop_reconstruct(packets, msgs[49].value_q / 1e4)
    assert est == [r.value() for r in temperature_trace[50:]]


def test_eavesdrop_mid_stream(temperature_trace):
    msgs = _encode(temperature_trace)
    j = 700
    est = eavesdrop_reconstruct_q(msgs[j:], 0)
    truth = [r.value_q for r in temperature_trace]
    assert all(est[i - j] == truth[i] - truth[j - 1] for i in range(j, len(truth)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6), st.integers(51, 1300), st.floats(-50, 50))
def test_simulated_eavesdropper_offset_constant(seed, join_index, start):
    cfg = scenario(seed=seed, trace=temperature_spec(seed=seed),
                   attacker=AttackerConfig(AttackMode.EAVESDROP, join_index * 1000,
                                           assumed_start=start))
    res = simulate(cfg)
    # a re-handshake puts a fresh plaintext baseline on the wire; from then on
    # the attacker is anchored on a true value
    rebase = next((t for m, t in res.captured if isinstance(m, BaselineSample)), None)
    before = {e - t for _, ts, e, t in res.estimates if rebase is None or ts < rebase}
    after = {e - t for _, ts, e, t in res.estimates if rebase is not None and ts > rebase}
    anchor_q = res.truth[(1, (join_index - 1) * 1000)]
    assert before == {quantize(start) - anchor_q}
    assert after <= {0}


# ------------------------------------------------------------------ attacks

@pytest.mark.parametrize("seed", [11, 1, 2, 3, 4])
def test_mitm_counts_match_replay(seed):
    cfg = mitm(seed)
    oracle = replay_mitm(cfg)
    report = run_scenario(cfg)
    assert {k: getattr(report, k) for k in REPLAY_KEYS} == {k: oracle.get(k, 0) for k in REPLAY_KEYS}
    assert report.detected <= report.injected


def test_no_injection_at_rate_zero():
    r = run_scenario(mitm(rate=0.0))
    assert (r.injected, r.detected, r.forged_accepted) == (0, 0, 0)
    assert r.reconstruction_exact


@pytest.mark.parametrize("seed", [11, 1, 2])
def test_detection_monotone_in_width(seed):
    rates = [run_scenario(mitm(seed, width=w)).detection_rate for w in (1, 2, 5, 10, 20, 40, 80)]
    assert all(b >= a for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("seed", [11, 5])
def test_detection_non_increasing_in_k_sigma(seed):
    rates = [run_scenario(mitm(seed, k=k)).detection_rate for k in (2, 4, 8)]
    assert rates[0] >= rates[1] >= rates[2]


# --------------------------------------------------------------------- loss

@pytest.mark.parametrize("seed", range(6))
def test_loss_never_yields_wrong_values(seed):
    cfg = scenario(seed=seed, trace=temperature_spec(seed=seed),
                   channel=ChannelConfig(loss_prob=0.01, delay_ms=5, jitter_ms=4, seed=seed))
    res = simulate(cfg)
    r = res.report
    assert r.reconstruction_exact
    assert r.lost_packets > 0
    assert r.desyncs <= r.lost_packets + len(res.log.quarantined)
    truth = res.truth
    assert all(truth[(c.sensor_id, c.timestamp)] == c.value_q
               for c in res.log.committed_readings())


def test_isolated_losses_each_cause_one_desync():
    cfg = scenario(channel=ChannelConfig(loss_prob=0.004, seed=8))
    res = simulate(cfg)
    lost_times = sorted(r["t"] for r in res.log.records if r.get("dropped"))
    gaps = [b - a for a, b in zip(lost_times, lost_times[1:])]
    assert lost_times and all(g > 60_000 for g in gaps)
    assert lost_times[-1] < cfg.trace.n_samples * 1000 - 1000
    assert res.report.desyncs == len(lost_times) + len(res.log.quarantined)


# ------------------------------------------------------------------- config

def test_config_from_dict_collects_all_errors():
    with pytest.raises(ConfigError) as exc:
        ScenarioConfig.from_dict({
            "channel": {"loss_prob": 2.0, "typo": 1},
            "attacker": {"mode": "MITM_INJECT", "inject_rate": 500},
            "surprise": True,
        })
    paths = {p for p, _ in exc.value.errors}
    assert {"seed", "trace", "surprise", "channel.typo", "channel.loss_prob",
            "attacker.inject_rate"} <= paths


def test_config_round_trip():
    cfg = mitm(3)
    assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_delay_must_fit_in_period():
    with pytest.raises(ConfigError):
        run_scenario(scenario(channel=ChannelConfig(delay_ms=999)))


def test_multi_sensor_matrix_scenario():
    from isf.traces import TraceKind
    cfg = scenario(trace=TraceSpec(kind=TraceKind.PRESSURE_MATRIX, n_samples=80, mean=5.0,
                                   variance=1e-4, posture_events=((60_000, "PRONE"),)))
    r = run_scenario(cfg)
    assert r.readings == 25 * 80
    # a posture change is a genuine jump the forecast flags; nothing wrong is committed
    assert r.reconstruction_exact and r.false_positives > 0
    assert r.committed <= r.readings - r.false_positives
