"""Residual-based obfuscation of sensor telemetry, with forecast-checked reconstruction."""

from .codec import (AggMeta, BaselineSample, ObfuscatedPacket, QuantizationSpec, SensorReading,
                    Status, dequantize, quantize)
from .errors import (ConfigError, DesyncError, Hl7FieldError, Hl7ParseError, InputError,
                     IsfError, QuantizationError, ReplayError, SequenceError)
from .forecast import ARModel, ToleranceConfig, consistency_check, fit_ar, forecast_next
from .netsim import ScenarioConfig, SimReport, run_scenario
from .stats import RunningAggregate
from .traces import TraceKind, TraceSpec

__version__ = "0.1.0"

__all__ = [
    "AggMeta", "ARModel", "BaselineSample", "ConfigError", "DesyncError", "Hl7FieldError",
    "Hl7ParseError", "InputError", "IsfError", "ObfuscatedPacket", "QuantizationError",
    "QuantizationSpec", "ReplayError", "RunningAggregate", "ScenarioConfig", "SensorReading",
    "SequenceError", "SimReport", "Status", "ToleranceConfig", "TraceKind", "TraceSpec",
    "consistency_check", "dequantize", "fit_ar", "forecast_next", "quantize", "run_scenario",
]
