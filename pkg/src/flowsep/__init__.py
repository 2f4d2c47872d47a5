"""Source-only-supervised music source separation with Glow spectrogram priors."""

from flowsep.errors import (
    ConfigError,
    DatasetError,
    FlowsepError,
    NumericError,
    ShapeError,
    UnsupportedEncodingError,
    WavFormatError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetError",
    "FlowsepError",
    "NumericError",
    "ShapeError",
    "UnsupportedEncodingError",
    "WavFormatError",
]
