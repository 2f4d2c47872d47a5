class FlowsepError(Exception):
    """Base class for all package errors."""


class ConfigError(FlowsepError, ValueError):
    pass


class ShapeError(FlowsepError, ValueError):
    pass


class WavFormatError(FlowsepError):
    """Malformed RIFF/WAVE container."""


class UnsupportedEncodingError(FlowsepError):
    """Well-formed WAV with an encoding we do not read (e.g. PCM24, uint8)."""


class DatasetError(FlowsepError):
    pass


class NumericError(FlowsepError, ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class StaleTapeError(FlowsepError, RuntimeError):
    pass
