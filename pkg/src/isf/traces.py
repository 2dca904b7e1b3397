"""
Synthetic sensor traces.

Three kinds are produced: a stationary Gaussian temperature series, a 5x5
bed pressure matrix driven by posture events, and a generic AR process.
Poisson arrival times are available for irregular report timing.

All generators are deterministic for a fixed seed. Values are quantized at
generation time so a trace written to CSV and read back is bit-identical.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, TextIO

import numpy as np

from .codec import (QuantizationSpec, SensorReading, Status, format_quantized, quantize,
                    quantize_text)
from .errors import ConfigError, InputError

DEFAULT_PERIOD_MS = 1000
CSV_HEADER = ("timestamp_ms", "sensor_id", "value", "status")


class TraceKind(enum.Enum):
    TEMPERATURE = "TEMPERATURE"
    PRESSURE_MATRIX = "PRESSURE_MATRIX"
    AR_SYNTH = "AR_SYNTH"


@dataclass(frozen=True)
class TraceSpec:
    kind: TraceKind = TraceKind.TEMPERATURE
    n_samples: int = 1400
    mean: float = 20.65627
    variance: float = 0.00233
    ar_coeffs: Optional[tuple[float, ...]] = None
    rows: int = 5
    cols: int = 5
    seed: int = 0
    period_ms: int = DEFAULT_PERIOD_MS
    start_ms: int = 0
    sensor_id: int = 1
    scale_digits: int = 4
    # "periodic" or "poisson"; poisson uses 1000 / period_ms events per second
    arrivals: str = "periodic"
    posture_events: tuple[tuple[int, str], ...] = ()

    def validate(self) -> None:
        errors = []
        if self.n_samples < 1:
            errors.append(("n_samples", "must be >= 1"))
        if not (math.isfinite(self.variance) and self.variance >= 0):
            errors.append(("variance", "must be finite and >= 0"))
        if not math.isfinite(self.mean):
            errors.append(("mean", "must be finite"))
        if self.kind is TraceKind.PRESSURE_MATRIX and self.rows * self.cols < 1:
            errors.append(("rows/cols", "matrix needs at least one sensor"))
        if self.period_ms < 1:
            errors.append(("period_ms", "must be >= 1"))
        if self.arrivals not in ("periodic", "poisson"):
            errors.append(("arrivals", "must be 'periodic' or 'poisson'"))
        if not 0 <= self.scale_digits <= 9:
            errors.append(("scale_digits", "must be in [0, 9]"))
        if self.kind is TraceKind.AR_SYNTH and not self.ar_coeffs:
            errors.append(("ar_coeffs", "required for AR_SYNTH"))
        for _, name in self.posture_events:
            if name not in POSTURES:
                errors.append(("posture_events", f"unknown posture {name!r}"))
        if errors:
            raise ConfigError(errors)

    @property
    def quant(self) -> QuantizationSpec:
        return QuantizationSpec(self.scale_digits)

    @classmethod
    def from_dict(cls, data: dict) -> "TraceSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([(key, "unknown field") for key in unknown])
        kwargs = dict(data)
        try:
            if "kind" in kwargs:
                kwargs["kind"] = TraceKind(str(kwargs["kind"]).upper())
            if kwargs.get("ar_coeffs") is not None:
                kwargs["ar_coeffs"] = tuple(float(c) for c in kwargs["ar_coeffs"])
            if "posture_events" in kwargs:
                kwargs["posture_events"] = tuple(
                    (int(t), str(p)) for t, p in kwargs["posture_events"])
        except (ValueError, TypeError) as exc:
            raise ConfigError([("trace", str(exc))]) from exc
        spec = cls(**kwargs)
        try:
            spec.validate()
        except TypeError as exc:
            raise ConfigError([("trace", f"wrong value type: {exc}")]) from None
        return spec

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value, "n_samples": self.n_samples, "mean": self.mean,
            "variance": self.variance,
            "ar_coeffs": list(self.ar_coeffs) if self.ar_coeffs else None,
            "rows": self.rows, "cols": self.cols, "seed": self.seed,
            "period_ms": self.period_ms, "start_ms": self.start_ms,
            "sensor_id": self.sensor_id, "scale_digits": self.scale_digits,
            "arrivals": self.arrivals,
            "posture_events": [list(e) for e in self.posture_events],
        }


def poisson_arrivals(rate_per_s: float, duration_s: float, seed: int = 0) -> list[float]:
    """Arrival times in seconds on ``[0, duration_s)`` with exponential gaps of mean 1/rate."""
    if rate_per_s <= 0:
        raise InputError("rate must be positive")
    rng = np.random.default_rng(seed)
    times: list[float] = []
    t = 0.0
    # draw in blocks; the expected count is rate * duration
    block = max(16, int(rate_per_s * duration_s * 1.1) + 16)
    while True:
        for gap in rng.exponential(1.0 / rate_per_s, size=block):
            t += float(gap)
            if t >= duration_s:
                return times
            times.append(t)


def _timestamps(spec: TraceSpec, n: int) -> list[int]:
    if spec.arrivals == "periodic":
        return [spec.start_ms + i * spec.period_ms for i in range(n)]
    rate = 1000.0 / spec.period_ms
    rng = np.random.default_rng([spec.seed, 0x7A11])
    gaps = rng.exponential(1.0 / rate, size=n)
    out = []
    t = float(spec.start_ms)
    last = spec.start_ms - 1
    for g in gaps:
        t += float(g) * 1000.0
        # millisecond resolution; keep strictly increasing
        ms = max(int(round(t)), last + 1)
        out.append(ms)
        last = ms
    return out


def gen_temperature(spec: TraceSpec) -> list[SensorReading]:
    """Stationary Gaussian series at ``(mean, variance)``."""
    if spec.variance < 0:
        raise InputError("variance must be non-negative")
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal(spec.n_samples) * math.sqrt(spec.variance)
    quant = spec.quant
    return [
        SensorReading(spec.sensor_id, ts, quantize(spec.mean + float(e), quant))
        for ts, e in zip(_timestamps(spec, spec.n_samples), noise)
    ]


def gen_ar(spec: TraceSpec, burn_in: int = 200) -> list[SensorReading]:
    """AR process around ``mean`` with innovation variance ``variance``."""
    spec.validate()
    coeffs = np.asarray(spec.ar_coeffs, dtype=float)
    p = len(coeffs)
    rng = np.random.default_rng(spec.seed)
    total = spec.n_samples + burn_in
    eps = rng.standard_normal(total) * math.sqrt(spec.variance)
    x = np.zeros(total + p)
    for t in range(p, total + p):
        x[t] = coeffs @ x[t - p:t][::-1] + eps[t - p]
    values = x[p + burn_in:] + spec.mean
    quant = spec.quant
    return [
        SensorReading(spec.sensor_id, ts, quantize(float(v), quant))
        for ts, v in zip(_timestamps(spec, spec.n_samples), values)
    ]


# Load masks for a 5x5 mattress grid, row 0 at the head. Weights are the
# fraction of full-scale force each strip sees for a posture.
POSTURES: dict[str, tuple[tuple[float, ...], ...]] = {
    "EMPTY": (
        (0.0, 0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 0.0, 0.0),
    ),
    "SUPINE": (
        (0.0, 0.3, 0.6, 0.3, 0.0),
        (0.2, 0.7, 0.8, 0.7, 0.2),
        (0.1, 0.5, 0.9, 0.5, 0.1),
        (0.0, 0.4, 0.5, 0.4, 0.0),
        (0.0, 0.3, 0.0, 0.3, 0.0),
    ),
    "LEFT_LATERAL": (
        (0.4, 0.5, 0.0, 0.0, 0.0),
        (0.8, 0.6, 0.1, 0.0, 0.0),
        (0.9, 0.7, 0.2, 0.0, 0.0),
        (0.6, 0.5, 0.1, 0.0, 0.0),
        (0.4, 0.3, 0.0, 0.0, 0.0),
    ),
    "RIGHT_LATERAL": (
        (0.0, 0.0, 0.0, 0.5, 0.4),
        (0.0, 0.0, 0.1, 0.6, 0.8),
        (0.0, 0.0, 0.2, 0.7, 0.9),
        (0.0, 0.0, 0.1, 0.5, 0.6),
        (0.0, 0.0, 0.0, 0.3, 0.4),
    ),
    "PRONE": (
        (0.0, 0.2, 0.5, 0.2, 0.0),
        (0.3, 0.6, 0.6, 0.6, 0.3),
        (0.1, 0.6, 0.7, 0.6, 0.1),
        (0.0, 0.5, 0.6, 0.5, 0.0),
        (0.0, 0.4, 0.1, 0.4, 0.0),
    ),
    "SITTING": (
        (0.0, 0.0, 0.0, 0.0, 0.0),
        (0.0, 0.1, 0.1, 0.1, 0.0),
        (0.2, 0.8, 1.0, 0.8, 0.2),
        (0.1, 0.6, 0.7, 0.6, 0.1),
        (0.0, 0.1, 0.1, 0.1, 0.0),
    ),
}


def posture_mask(name: str, rows: int = 5, cols: int = 5) -> np.ndarray:
    """Posture template resampled (nearest neighbour) onto a ``rows x cols`` grid."""
    try:
        template = np.asarray(POSTURES[name], dtype=float)
    except KeyError:
        raise InputError(f"unknown posture {name!r}") from None
    r_idx = (np.arange(rows) * template.shape[0]) // rows
    c_idx = (np.arange(cols) * template.shape[1]) // cols
    return template[np.ix_(r_idx, c_idx)]


def gen_pressure_matrix(spec: TraceSpec,
                        posture_events: Optional[Sequence[tuple[int, str]]] = None,
                        initial_posture: str = "SUPINE") -> dict[int, list[SensorReading]]:
    """One synchronized trace per strip sensor, keyed ``row * cols + col``.

    Level is ``mean * mask_weight`` plus Gaussian noise of ``variance``. At a
    posture event (time in ms) the mask switches; sensors whose weight changes
    report ALARM on that reading, standing in for the camera trigger.
    """
    spec.validate()
    events = sorted(spec.posture_events if posture_events is None else posture_events)
    for _, name in events:
        if name not in POSTURES:
            raise InputError(f"unknown posture {name!r}")
    rows, cols = spec.rows, spec.cols
    n = spec.n_samples
    stamps = _timestamps(spec, n)
    rng = np.random.default_rng(spec.seed)
    noise = rng.standard_normal((n, rows * cols)) * math.sqrt(spec.variance)
    quant = spec.quant

    mask = posture_mask(initial_posture, rows, cols).ravel()
    pending = list(events)
    traces: dict[int, list[SensorReading]] = {sid: [] for sid in range(rows * cols)}
    for i, ts in enumerate(stamps):
        changed = np.zeros(rows * cols, dtype=bool)
        while pending and pending[0][0] <= ts:
            _, name = pending.pop(0)
            new_mask = posture_mask(name, rows, cols).ravel()
            changed |= new_mask != mask
            mask = new_mask
        levels = spec.mean * mask + noise[i]
        for sid in range(rows * cols):
            status = Status.ALARM if changed[sid] else Status.OK
            traces[sid].append(SensorReading(sid, ts, quantize(float(levels[sid]), quant), status))
    return traces


def generate(spec: TraceSpec) -> list[SensorReading]:
    """Generate any trace kind as a flat, time-ordered list of readings."""
    if spec.kind is TraceKind.TEMPERATURE:
        return gen_temperature(spec)
    if spec.kind is TraceKind.AR_SYNTH:
        return gen_ar(spec)
    traces = gen_pressure_matrix(spec)
    return sorted((r for rs in traces.values() for r in rs),
                  key=lambda r: (r.timestamp, r.sensor_id))


def write_trace_csv(readings: Iterable[SensorReading], stream: TextIO,
                    quant: QuantizationSpec = QuantizationSpec()) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in readings:
        writer.writerow([r.timestamp, r.sensor_id, format_quantized(r.value_q, quant),
                         r.status.name])


def read_trace_csv(stream: TextIO,
                   quant: QuantizationSpec = QuantizationSpec()) -> list[SensorReading]:
    reader = csv.reader(stream)
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
        raise InputError(f"trace CSV must start with header {','.join(CSV_HEADER)}")
    out = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            ts, sid, value, status = row
            out.append(SensorReading(int(sid), int(ts), quantize_text(value, quant),
                                     Status[status.strip()]))
        except (ValueError, KeyError) as exc:
            raise InputError(f"line {lineno}: {exc}") from None
    return out


def trace_to_csv(readings: Iterable[SensorReading],
                 quant: QuantizationSpec = QuantizationSpec()) -> str:
    buf = io.StringIO()
    write_trace_csv(readings, buf, quant)
    return buf.getvalue()
