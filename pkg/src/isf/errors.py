"""Exception hierarchy shared by all isf modules."""


class IsfError(Exception):
    """Base class for every error raised by this package."""


class InputError(IsfError, ValueError):
    """A value supplied by the caller is unusable (non-finite, out of range, ...)."""


class QuantizationError(InputError):
    """A value or residual does not fit the signed 64-bit fixed-point range."""


class SequenceError(IsfError):
    """Base for sequence-number violations detected by the manager codec."""

    def __init__(self, message: str, expected: int, got: int):
        super().__init__(message)
        self.expected = expected
        self.got = got


class DesyncError(SequenceError):
    """A sequence gap: at least one packet of the residual chain is missing."""


class ReplayError(SequenceError):
    """A packet whose sequence number was already consumed."""


class Hl7ParseError(IsfError, ValueError):
    """ER7 text could not be parsed."""


class Hl7FieldError(Hl7ParseError):
    """A specific field of a segment holds a malformed value."""

    def __init__(self, segment: str, index: int, field: int, reason: str):
        super().__init__(f"{segment}[{index}].{field}: {reason}")
        self.segment = segment
        self.index = index
        self.field = field


class ConfigError(IsfError, ValueError):
    """A scenario or trace configuration failed validation.

    ``errors`` lists every offending field as ``(path, message)`` pairs.
    """

    def __init__(self, errors):
        self.errors = list(errors)
        joined = "; ".join(f"{path}: {msg}" for path, msg in self.errors)
        super().__init__(f"invalid configuration: {joined}")
