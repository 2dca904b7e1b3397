"""
Agent and manager session state machines.

Flow per sensor session::

    agent    IDLE --ADDR_ACQUIRED--> ASSOCIATING --ASSOC_ACCEPT--> BASELINE
             BASELINE --(baseline_n samples)--> OBFUSCATED
             any --STATUS_ERROR | DESYNC--> ERROR --ASSOC_ACCEPT--> (ASSOCIATING) BASELINE

The manager mirrors the phases. It fits an AR model once the baseline is
complete, checks every data packet against the model's forecast, commits
accepted values and quarantines rejected ones. A sequence gap moves it to
ERROR and asks the agent to re-associate, which starts a fresh baseline.

Step functions mutate the state they are given and return it together with
their outputs. Invalid payloads raise before any mutation.
"""

from __future__ import annotations

import enum
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Sequence, Union

from . import codec
from .codec import (BaselineSample, CodecSession, ObfuscatedPacket, Phase, QuantizationSpec,
                    SensorReading, Side)
from .errors import DesyncError, InputError, ReplayError
from .stats import aggregate_of
from .forecast import (DEFAULT_ORDER, DEFAULT_REFIT_EVERY, ARModel, ToleranceConfig, Verdict,
                       consistency_check, fit_ar)

DEFAULT_REPORT_PERIOD_MS = 1000
DEFAULT_HISTORY_WINDOW = 200


class ProtoPhase(enum.Enum):
    IDLE = "IDLE"
    ASSOCIATING = "ASSOCIATING"
    BASELINE = "BASELINE"
    OBFUSCATED = "OBFUSCATED"
    ERROR = "ERROR"


class EventKind(enum.Enum):
    ADDR_ACQUIRED = "ADDR_ACQUIRED"
    ASSOC_REQUEST = "ASSOC_REQUEST"
    ASSOC_ACCEPT = "ASSOC_ACCEPT"
    BASELINE_SAMPLE = "BASELINE_SAMPLE"
    DATA_PACKET = "DATA_PACKET"
    TIMER = "TIMER"
    STATUS_ERROR = "STATUS_ERROR"
    DESYNC = "DESYNC"


@dataclass(frozen=True)
class AssocParams:
    """Parameters both ends must share for exact reconstruction."""

    sensor_id: int
    scale_digits: int = codec.DEFAULT_SCALE_DIGITS
    baseline_n: int = codec.DEFAULT_BASELINE_N


_PAYLOAD_TYPES: dict[EventKind, tuple] = {
    EventKind.ADDR_ACQUIRED: (type(None),),
    EventKind.ASSOC_REQUEST: (AssocParams,),
    EventKind.ASSOC_ACCEPT: (AssocParams,),
    EventKind.BASELINE_SAMPLE: (BaselineSample,),
    EventKind.DATA_PACKET: (ObfuscatedPacket,),
    EventKind.TIMER: (SensorReading,),
    EventKind.STATUS_ERROR: (type(None), str),
    EventKind.DESYNC: (type(None), int),
}


@dataclass(frozen=True)
class ProtocolEvent:
    kind: EventKind
    payload: Any = None

    def validate(self) -> None:
        if not isinstance(self.kind, EventKind):
            raise InputError(f"unknown event kind {self.kind!r}")
        if not isinstance(self.payload, _PAYLOAD_TYPES[self.kind]):
            raise InputError(
                f"{self.kind.value} cannot carry {type(self.payload).__name__} payload")


class ActionKind(enum.Enum):
    SEND = "SEND"                # message back to the agent
    COMMIT = "COMMIT"            # value accepted into the manager's stream
    QUARANTINE = "QUARANTINE"    # value rejected by the forecast check
    MODEL_FIT = "MODEL_FIT"
    REHANDSHAKE = "REHANDSHAKE"  # chain broken; fresh baseline required
    DROP = "DROP"                # message ignored (wrong phase, duplicate, ...)


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    message: Optional[ProtocolEvent] = None
    reading: Optional[SensorReading] = None
    verdict: Optional[Verdict] = None
    model: Optional[ARModel] = None
    seq: Optional[int] = None
    reason: str = ""


@dataclass(frozen=True)
class SessionConfig:
    scale_digits: int = codec.DEFAULT_SCALE_DIGITS
    baseline_n: int = codec.DEFAULT_BASELINE_N
    meta_every: int = codec.DEFAULT_META_EVERY
    ar_order: int = DEFAULT_ORDER
    diff_order: int = 0
    refit_every: int = DEFAULT_REFIT_EVERY
    history_window: int = DEFAULT_HISTORY_WINDOW
    report_period_ms: int = DEFAULT_REPORT_PERIOD_MS
    tolerance: ToleranceConfig = field(default_factory=ToleranceConfig)

    @property
    def quant(self) -> QuantizationSpec:
        return QuantizationSpec(self.scale_digits)


# ------------------------------------------------------------------- agent

@dataclass
class AgentState:
    sensor_id: int
    config: SessionConfig = field(default_factory=SessionConfig)
    phase: ProtoPhase = ProtoPhase.IDLE
    codec: Optional[CodecSession] = None
    report_period: int = DEFAULT_REPORT_PERIOD_MS
    pending_timers: list = field(default_factory=list)
    phase_history: list = field(default_factory=list)
    unsent: int = 0

    def _enter(self, phase: ProtoPhase, now: int) -> None:
        self.phase = phase
        self.phase_history.append((now, phase))

    def params(self) -> AssocParams:
        return AssocParams(self.sensor_id, self.config.scale_digits, self.config.baseline_n)


def new_agent(sensor_id: int, config: SessionConfig = SessionConfig()) -> AgentState:
    return AgentState(sensor_id, config, report_period=config.report_period_ms)


def agent_step(state: AgentState, event: ProtocolEvent,
               now: int) -> tuple[AgentState, list[ProtocolEvent]]:
    event.validate()
    kind = event.kind
    out: list[ProtocolEvent] = []

    if kind in (EventKind.STATUS_ERROR, EventKind.DESYNC):
        state._enter(ProtoPhase.ERROR, now)
        state.codec = None
        state.pending_timers.clear()
        out.append(ProtocolEvent(EventKind.ASSOC_REQUEST, state.params()))

    elif kind is EventKind.ADDR_ACQUIRED:
        if state.phase is ProtoPhase.IDLE:
            state._enter(ProtoPhase.ASSOCIATING, now)
            out.append(ProtocolEvent(EventKind.ASSOC_REQUEST, state.params()))

    elif kind is EventKind.ASSOC_ACCEPT:
        if state.phase in (ProtoPhase.ASSOCIATING, ProtoPhase.ERROR):
            params = event.payload
            if params.sensor_id != state.sensor_id:
                raise InputError("association accepted for a different sensor")
            if state.phase is ProtoPhase.ERROR:
                state._enter(ProtoPhase.ASSOCIATING, now)
            state.codec = codec.new_session(
                Side.AGENT, state.sensor_id, QuantizationSpec(params.scale_digits),
                params.baseline_n, state.config.meta_every)
            state._enter(ProtoPhase.BASELINE, now)
            state.pending_timers = [now + state.report_period]

    elif kind is EventKind.TIMER:
        reading = event.payload
        if state.phase in (ProtoPhase.BASELINE, ProtoPhase.OBFUSCATED):
            msg = codec.encode_reading(state.codec, reading)
            if isinstance(msg, BaselineSample):
                out.append(ProtocolEvent(EventKind.BASELINE_SAMPLE, msg))
            else:
                out.append(ProtocolEvent(EventKind.DATA_PACKET, msg))
            if state.codec.phase is Phase.OBFUSCATED and state.phase is ProtoPhase.BASELINE:
                state._enter(ProtoPhase.OBFUSCATED, now)
            state.pending_timers = [now + state.report_period]
        else:
            state.unsent += 1
    # remaining kinds are manager-bound and ignorable here
    return state, out


# ----------------------------------------------------------------- manager

@dataclass
class ManagerState:
    config: SessionConfig = field(default_factory=SessionConfig)
    phase: ProtoPhase = ProtoPhase.IDLE
    codec: Optional[CodecSession] = None
    forecaster_model: Optional[ARModel] = None
    history_window: deque = field(default_factory=lambda: deque(maxlen=DEFAULT_HISTORY_WINDOW))
    verdict_log: list = field(default_factory=list)
    since_fit: int = 0
    rejected: int = 0
    desyncs: int = 0

    def __post_init__(self):
        if self.history_window.maxlen != self.config.history_window:
            self.history_window = deque(self.history_window, maxlen=self.config.history_window)


def new_manager(config: SessionConfig = SessionConfig()) -> ManagerState:
    return ManagerState(config)


def _fit(state: ManagerState) -> ARModel:
    cfg = state.config
    values = list(state.history_window)
    try:
        return fit_ar(values, cfg.ar_order, cfg.diff_order)
    except InputError:
        # window too short for the requested order: fall back to its mean
        agg = aggregate_of(values)
        return ARModel.mean_only(agg.mean, cfg.ar_order, 0, agg.std())


def _rehandshake(state: ManagerState, expected: int, got: int, reason: str) -> list[Action]:
    state.phase = ProtoPhase.ERROR
    state.desyncs += 1
    state.forecaster_model = None
    return [
        Action(ActionKind.REHANDSHAKE, seq=got, reason=reason),
        Action(ActionKind.SEND, message=ProtocolEvent(EventKind.DESYNC, expected)),
    ]


def manager_step(state: ManagerState, event: ProtocolEvent,
                 now: int) -> tuple[ManagerState, list[Action]]:
    event.validate()
    kind = event.kind
    cfg = state.config

    if kind is EventKind.ASSOC_REQUEST:
        params = event.payload
        state.codec = codec.new_session(Side.MANAGER, params.sensor_id,
                                        QuantizationSpec(params.scale_digits), params.baseline_n,
                                        cfg.meta_every)
        state.phase = ProtoPhase.BASELINE
        state.forecaster_model = None
        state.history_window.clear()
        state.since_fit = 0
        return state, [Action(ActionKind.SEND, message=ProtocolEvent(EventKind.ASSOC_ACCEPT, params))]

    if kind is EventKind.BASELINE_SAMPLE:
        sample = event.payload
        if state.phase is not ProtoPhase.BASELINE:
            return state, [Action(ActionKind.DROP, seq=sample.seq, reason=f"baseline sample in {state.phase.value}")]
        try:
            reading = codec.accept_baseline(state.codec, sample)
        except ReplayError:
            return state, [Action(ActionKind.DROP, seq=sample.seq, reason="duplicate baseline sample")]
        except DesyncError as exc:
            return state, _rehandshake(state, exc.expected, exc.got, "baseline gap")
        except InputError as exc:
            return state, [Action(ActionKind.DROP, seq=sample.seq, reason=str(exc))]
        state.history_window.append(reading.value(state.codec.quant))
        actions = [Action(ActionKind.COMMIT, reading=reading, seq=sample.seq)]
        if state.codec.phase is Phase.OBFUSCATED:
            state.forecaster_model = _fit(state)
            state.since_fit = 0
            state.phase = ProtoPhase.OBFUSCATED
            actions.append(Action(ActionKind.MODEL_FIT, model=state.forecaster_model))
        return state, actions

    if kind is EventKind.DATA_PACKET:
        packet = event.payload
        if state.phase is not ProtoPhase.OBFUSCATED:
            return state, [Action(ActionKind.DROP, seq=packet.seq, reason=f"data packet in {state.phase.value}")]
        session = state.codec
        try:
            reading = codec.peek_packet(session, packet)
        except ReplayError as exc:
            if session.recent.get(packet.seq) == packet.residual_q:
                return state, [Action(ActionKind.DROP, seq=packet.seq, reason="duplicate")]
            # same seq, different content: the committed value may be forged
            return state, _rehandshake(state, exc.expected, exc.got, "replay conflict")
        except DesyncError as exc:
            return state, _rehandshake(state, exc.expected, exc.got, "sequence gap")
        except InputError as exc:
            return state, [Action(ActionKind.DROP, seq=packet.seq, reason=str(exc))]

        observed = reading.value(session.quant)
        verdict = consistency_check(observed, state.forecaster_model, state.history_window,
                                    cfg.tolerance)
        state.verdict_log.append(verdict)
        if not verdict.accepted:
            state.rejected += 1
            return state, [Action(ActionKind.QUARANTINE, reading=reading, verdict=verdict,
                                  seq=packet.seq)]
        codec.commit_packet(session, packet, reading)
        state.history_window.append(observed)
        actions = [Action(ActionKind.COMMIT, reading=reading, verdict=verdict, seq=packet.seq)]
        state.since_fit += 1
        if cfg.refit_every and state.since_fit >= cfg.refit_every:
            state.forecaster_model = _fit(state)
            state.since_fit = 0
            actions.append(Action(ActionKind.MODEL_FIT, model=state.forecaster_model))
        return state, actions

    return state, []


# ------------------------------------------------------------------ logging

def _reading_record(r: SensorReading) -> dict:
    return {"sensor_id": r.sensor_id, "timestamp": r.timestamp, "value_q": r.value_q,
            "status": r.status.name}


def _message_record(msg: Union[BaselineSample, ObfuscatedPacket, AssocParams, Any]) -> dict:
    if isinstance(msg, BaselineSample):
        return {"seq": msg.seq, "sensor_id": msg.sensor_id, "timestamp": msg.timestamp,
                "value_q": msg.value_q, "status": msg.status.name}
    if isinstance(msg, ObfuscatedPacket):
        rec = {"seq": msg.seq, "sensor_id": msg.sensor_id, "timestamp": msg.timestamp,
               "residual_q": msg.residual_q, "status": msg.status.name}
        if msg.agg_meta is not None:
            rec["agg_meta"] = [msg.agg_meta.count, msg.agg_meta.variance]
        return rec
    if isinstance(msg, AssocParams):
        return {"sensor_id": msg.sensor_id, "scale_digits": msg.scale_digits,
                "baseline_n": msg.baseline_n}
    return {"value": msg}


@dataclass
class SessionLog:
    """Everything that happened in one run, in order.

    ``records`` serialize one per line (see ``to_jsonl``); the typed lists
    next to them exist for analysis.
    """

    records: list = field(default_factory=list)
    readings: list = field(default_factory=list)    # ground truth fed to the agent
    sent: list = field(default_factory=list)        # BaselineSample / ObfuscatedPacket sent
    committed: list = field(default_factory=list)   # (SensorReading, Verdict | None)
    quarantined: list = field(default_factory=list)
    verdicts: list = field(default_factory=list)
    desyncs: int = 0
    raw_mode: bool = False

    def add(self, t: int, actor: str, kind: str, **fields) -> None:
        rec = {"t": t, "actor": actor, "kind": kind}
        rec.update(fields)
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.records)

    def record_outbound(self, t: int, event: ProtocolEvent, dropped: bool = False) -> None:
        if event.kind in (EventKind.BASELINE_SAMPLE, EventKind.DATA_PACKET):
            self.sent.append(event.payload)
        self.add(t, "agent", "send", msg=event.kind.value, dropped=dropped,
                 **_message_record(event.payload))

    def record_action(self, t: int, action: Action) -> None:
        fields: dict = {"action": action.kind.value}
        if action.seq is not None:
            fields["seq"] = action.seq
        if action.reason:
            fields["reason"] = action.reason
        if action.message is not None:
            fields["msg"] = action.message.kind.value
            if action.message.payload is not None:
                fields.update(_message_record(action.message.payload))
        if action.reading is not None:
            fields.update(_reading_record(action.reading))
        if action.verdict is not None:
            v = action.verdict
            fields.update(accepted=v.accepted, forecast=v.forecast, deviation=v.deviation,
                          threshold=v.threshold)
            self.verdicts.append(v)
        if action.model is not None:
            m = action.model
            fields.update(coefficients=list(m.coefficients), intercept=m.intercept,
                          residual_std=m.residual_std, degenerate=m.degenerate)
        if action.kind is ActionKind.COMMIT:
            self.committed.append((action.reading, action.verdict))
        elif action.kind is ActionKind.QUARANTINE:
            self.quarantined.append((action.reading, action.verdict))
        elif action.kind is ActionKind.REHANDSHAKE:
            self.desyncs += 1
        self.add(t, "manager", "action", **fields)

    def committed_readings(self) -> list[SensorReading]:
        return [r for r, _ in self.committed]


def run_session(agent_trace: Sequence[SensorReading],
                loss_schedule: Iterable[int] = (),
                clock: Optional[Callable[[int, SensorReading], int]] = None,
                config: SessionConfig = SessionConfig()) -> SessionLog:
    """Drive one agent and one manager over a trace with instant delivery.

    ``loss_schedule`` holds trace indices whose outbound sample or packet is
    lost in transit. ``clock(i, reading)`` gives the logical time of the i-th
    report (default: the reading's timestamp). Control messages are reliable.
    """
    lost = set(loss_schedule)
    log = SessionLog()
    if not agent_trace:
        return log
    sensor_id = agent_trace[0].sensor_id
    agent = new_agent(sensor_id, config)
    manager = new_manager(config)

    def pump(t: int, first: list[ProtocolEvent], index: Optional[int]) -> None:
        queue: deque = deque(("manager", e) for e in first)
        while queue:
            dest, ev = queue.popleft()
            if dest == "manager":
                dropped = index is not None and index in lost and ev.kind in (
                    EventKind.BASELINE_SAMPLE, EventKind.DATA_PACKET)
                log.record_outbound(t, ev, dropped)
                if dropped:
                    continue
                _, actions = manager_step(manager, ev, t)
                for a in actions:
                    log.record_action(t, a)
                    if a.kind is ActionKind.SEND:
                        queue.append(("agent", a.message))
            else:
                log.add(t, "agent", "recv", msg=ev.kind.value)
                _, out = agent_step(agent, ev, t)
                queue.extend(("manager", e) for e in out)

    start = (clock(0, agent_trace[0]) if clock else agent_trace[0].timestamp) - 1
    log.add(start, "agent", "event", msg=EventKind.ADDR_ACQUIRED.value)
    _, out = agent_step(agent, ProtocolEvent(EventKind.ADDR_ACQUIRED), start)
    pump(start, out, None)

    for i, reading in enumerate(agent_trace):
        now = clock(i, reading) if clock else reading.timestamp
        log.readings.append(reading)
        before = agent.phase
        _, out = agent_step(agent, ProtocolEvent(EventKind.TIMER, reading), now)
        if not out:
            log.add(now, "agent", "unsent", phase=before.value, **_reading_record(reading))
        pump(now, out, i)
    return log
