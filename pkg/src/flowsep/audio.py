"""Waveform ingestion, preprocessing, segmentation and writing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, resample_poly

from flowsep.errors import ConfigError, ShapeError, UnsupportedEncodingError, WavFormatError

PCM16_SCALE = 32768.0

# Windowed-sinc resampler: Kaiser window, RESAMPLE_HALF_WIDTH zero crossings
# per side at the slower of the two rates.
RESAMPLE_HALF_WIDTH = 10
RESAMPLE_KAISER_BETA = 5.0


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    label: Optional[str] = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ShapeError(f"AudioClip expects mono samples, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioClip":
        return replace(self, samples=samples)


@dataclass(frozen=True)
class MixtureSpec:
    stems: Sequence[AudioClip]
    # Mixing coefficients are fixed at 1; the field exists so callers can see it.
    alphas: tuple = field(default=None)

    def __post_init__(self):
        stems = tuple(self.stems)
        if not stems:
            raise ShapeError("MixtureSpec needs at least one stem")
        n, rate = len(stems[0]), stems[0].sample_rate
        for i, stem in enumerate(stems):
            if len(stem) != n or stem.sample_rate != rate:
                raise ShapeError(
                    f"stem {i} has {len(stem)} samples @ {stem.sample_rate} Hz, "
                    f"expected {n} @ {rate} Hz"
                )
        alphas = tuple(1.0 for _ in stems) if self.alphas is None else tuple(self.alphas)
        if len(alphas) != len(stems) or any(a != 1.0 for a in alphas):
            raise ConfigError("mixing coefficients are fixed at 1.0")
        object.__setattr__(self, "stems", stems)
        object.__setattr__(self, "alphas", alphas)


def load_wav(path, label: Optional[str] = None) -> AudioClip:
    """Read a PCM16 or float32 WAV file as a mono clip; stereo is averaged."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported bit depth" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from exc
        raise WavFormatError(f"{path}: {msg}") from exc
    except Exception as exc:  # struct errors, truncated chunks
        raise WavFormatError(f"{path}: {exc}") from exc

    if data.dtype == np.int16:
        samples = data.astype(np.float32) / np.float32(PCM16_SCALE)
    elif data.dtype == np.float32:
        samples = data.astype(np.float32, copy=True)
    else:
        raise UnsupportedEncodingError(f"{path}: unsupported sample type {data.dtype}")

    if samples.ndim == 2:
        if samples.shape[1] > 2:
            raise UnsupportedEncodingError(f"{path}: {samples.shape[1]} channels, expected 1 or 2")
        samples = samples.mean(axis=1, dtype=np.float64).astype(np.float32)
    if not np.all(np.isfinite(samples)):
        raise WavFormatError(f"{path}: non-finite samples")
    return AudioClip(np.clip(samples, -1.0, 1.0), rate, label)


def save_wav(clip: AudioClip, path, encoding: str = "float32") -> None:
    path = Path(path)
    if encoding == "float32":
        data = clip.samples.astype(np.float32)
    elif encoding == "pcm16":
        scaled = np.round(np.clip(clip.samples, -1.0, 1.0) * PCM16_SCALE)
        data = np.clip(scaled, -32768, 32767).astype(np.int16)
    else:
        raise ConfigError(f"encoding must be 'pcm16' or 'float32', got {encoding!r}")
    try:
        wavfile.write(path, clip.sample_rate, data)
    except OSError as exc:
        raise OSError(f"cannot write WAV to {path}: {exc}") from exc


def resample(
    clip: AudioClip,
    target_rate: int,
    half_width: int = RESAMPLE_HALF_WIDTH,
    kaiser_beta: float = RESAMPLE_KAISER_BETA,
) -> AudioClip:
    """Band-limited polyphase resampling with a Kaiser-windowed sinc kernel.

    The output has ``round(len * target / source)`` samples. Equal rates
    return the clip untouched.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ConfigError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    ratio = Fraction(target_rate, clip.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    out_len = int(round(len(clip) * target_rate / clip.sample_rate))
    if len(clip) == 0 or out_len == 0:
        return AudioClip(np.zeros(out_len, np.float32), target_rate, clip.label)

    max_rate = max(up, down)
    taps = firwin(2 * half_width * max_rate + 1, 1.0 / max_rate, window=("kaiser", kaiser_beta))
    y = resample_poly(clip.samples.astype(np.float64), up, down, window=taps * up)
    if y.shape[0] >= out_len:
        y = y[:out_len]
    else:
        y = np.pad(y, (0, out_len - y.shape[0]))
    return AudioClip(y.astype(np.float32), target_rate, clip.label)


def rms_dbfs(samples: np.ndarray) -> float:
    """RMS level in dBFS; ``-inf`` for digital silence."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        return -math.inf
    rms = math.sqrt(float(np.mean(samples * samples)))
    return 20.0 * math.log10(rms) if rms > 0 else -math.inf


def segment_nonsilent(clip: AudioClip, seconds: float, rms_floor_db: float = -60.0) -> list:
    """Cut ``clip`` into back-to-back windows and keep the ones above the RMS floor.

    Windows are exactly ``round(seconds * rate)`` samples; a trailing partial
    window is dropped.
    """
    if seconds <= 0:
        raise ConfigError(f"seconds must be positive, got {seconds}")
    width = int(round(seconds * clip.sample_rate))
    out = []
    for k in range(len(clip) // width):
        window = clip.samples[k * width:(k + 1) * width]
        if rms_dbfs(window) >= rms_floor_db:
            out.append(AudioClip(window.copy(), clip.sample_rate, clip.label))
    return out


def remix(spec: MixtureSpec) -> AudioClip:
    """Sample-wise sum of the stems, accumulated in list order."""
    acc = spec.stems[0].samples.astype(np.float64)
    for stem, alpha in zip(spec.stems[1:], spec.alphas[1:]):
        acc = acc + alpha * stem.samples.astype(np.float64)
    return AudioClip(acc.astype(np.float32), spec.stems[0].sample_rate)


def load_manifest(path) -> dict:
    """Read a ``{instrument: [wav paths]}`` manifest; relative paths resolve against the manifest."""
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: manifest must be a JSON object")
    manifest = {}
    for instrument, files in raw.items():
        if isinstance(files, str) or not isinstance(files, list):
            raise ConfigError(f"{path}: entry {instrument!r} must be a list of paths")
        manifest[instrument] = [str((path.parent / f).resolve()) if not Path(f).is_absolute() else f
                                for f in files]
    return manifest
