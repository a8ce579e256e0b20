"""Exception taxonomy shared across the stack."""


class ResotrackError(Exception):
    """Base class for all library errors."""


class ConfigError(ResotrackError, ValueError):
    """Invalid configuration value or malformed config document."""


class DomainError(ResotrackError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class RangeError(ResotrackError, ValueError):
    """Voltage outside the DAC/VCO operating range."""


class CalibrationError(ResotrackError, RuntimeError):
    """Scan-derived control parameters could not be computed."""


class NoDipError(CalibrationError):
    """Scan trace shows no usable resonance dip."""


class EstimationError(CalibrationError):
    """Spectrum metric (Q, depth) not recoverable from the trace."""


class ParameterError(ResotrackError, ValueError):
    """Invalid analysis parameter (window size, series length, ...)."""


class ProtocolError(ResotrackError, RuntimeError):
    """Telemetry wire-format violation."""
