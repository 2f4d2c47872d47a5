"""STFT analysis/synthesis and the magnitude/phase split."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from flowsep.audio import AudioClip
from flowsep.errors import ConfigError, ShapeError

DEFAULT_FFT = 1024
DEFAULT_HOP = 256


@dataclass(frozen=True)
class StftParams:
    fft_size: int = DEFAULT_FFT
    hop: int = DEFAULT_HOP
    window: str = "hann"
    sample_rate: int = 22050

    def __post_init__(self):
        if self.fft_size <= 0 or self.hop <= 0:
            raise ConfigError("fft_size and hop must be positive")
        if self.hop > self.fft_size:
            raise ConfigError(f"hop ({self.hop}) must not exceed fft_size ({self.fft_size})")
        if self.fft_size % 2:
            raise ConfigError("fft_size must be even")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")

    @property
    def freq_bins(self) -> int:
        return self.fft_size // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return 1 + n_samples // self.hop

    def to_dict(self) -> dict:
        return {"fft_size": self.fft_size, "hop": self.hop, "window": self.window,
                "sample_rate": self.sample_rate}

    @classmethod
    def from_dict(cls, d: dict) -> "StftParams":
        return cls(int(d["fft_size"]), int(d["hop"]), d.get("window", "hann"), int(d["sample_rate"]))


@dataclass(frozen=True)
class ComplexSpectrogram:
    bins: np.ndarray  # [freq_bins, frames]
    params: StftParams

    def __post_init__(self):
        if self.bins.ndim != 2 or self.bins.shape[0] != self.params.freq_bins:
            raise ShapeError(f"expected {self.params.freq_bins} frequency rows, got {self.bins.shape}")


@dataclass(frozen=True)
class MagnitudeSpectrogram:
    mags: np.ndarray
    params: StftParams

    @property
    def shape(self):
        return self.mags.shape

    def trimmed_even(self) -> "MagnitudeSpectrogram":
        frames = self.mags.shape[1] - self.mags.shape[1] % 2
        return MagnitudeSpectrogram(self.mags[:, :frames], self.params)


@dataclass(frozen=True)
class PhaseSpectrogram:
    phases: np.ndarray
    params: StftParams


def hann(n: int) -> np.ndarray:
    # periodic Hann: sums to a constant under hop = n/4 overlap-add
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _frame_view(x: np.ndarray, fft_size: int, hop: int, n_frames: int) -> np.ndarray:
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def stft(clip: AudioClip, fft_size: int = DEFAULT_FFT, hop: int = DEFAULT_HOP) -> ComplexSpectrogram:
    """Centered Hann STFT with reflect padding; ``1 + len // hop`` frames."""
    params = StftParams(fft_size, hop, "hann", clip.sample_rate)
    n = len(clip)
    if n < 1:
        raise ShapeError("cannot analyse an empty clip")
    pad = fft_size // 2
    x = np.pad(clip.samples.astype(np.float64), pad, mode="reflect" if n > 1 else "edge")
    frames = _frame_view(x, fft_size, hop, params.n_frames(n)) * hann(fft_size)
    bins = np.fft.rfft(frames, axis=1).T
    return ComplexSpectrogram(np.ascontiguousarray(bins), params)


def split(spec: ComplexSpectrogram):
    return (MagnitudeSpectrogram(np.abs(spec.bins), spec.params),
            PhaseSpectrogram(np.angle(spec.bins), spec.params))


def combine(mags: MagnitudeSpectrogram, phases: PhaseSpectrogram) -> ComplexSpectrogram:
    if mags.mags.shape != phases.phases.shape:
        raise ShapeError(f"magnitude {mags.mags.shape} and phase {phases.phases.shape} differ")
    return ComplexSpectrogram(mags.mags * np.exp(1j * phases.phases), mags.params)


def istft(spec: ComplexSpectrogram, out_len: int, label: Optional[str] = None) -> AudioClip:
    """Weighted overlap-add inverse of :func:`stft`, normalised by the summed squared window."""
    p = spec.params
    n_frames = spec.bins.shape[1]
    win = hann(p.fft_size)
    frames = np.fft.irfft(spec.bins.T, n=p.fft_size, axis=1) * win
    total = p.fft_size + p.hop * (n_frames - 1)
    y = np.zeros(total)
    wsum = np.zeros(total)
    idx = np.arange(p.fft_size)[None, :] + p.hop * np.arange(n_frames)[:, None]
    np.add.at(y, idx, frames)
    np.add.at(wsum, idx, np.broadcast_to(win * win, frames.shape))
    nz = wsum > 1e-10
    y[nz] /= wsum[nz]
    pad = p.fft_size // 2
    y = y[pad:pad + out_len]
    if y.shape[0] < out_len:
        y = np.pad(y, (0, out_len - y.shape[0]))
    return AudioClip(y.astype(np.float32), p.sample_rate, label)


def istft_with_phase(mags: MagnitudeSpectrogram, phases: PhaseSpectrogram, out_len: int,
                     label: Optional[str] = None) -> AudioClip:
    if mags.params != phases.params:
        raise ShapeError("magnitude and phase come from different STFT configurations")
    return istft(combine(mags, phases), out_len, label)


def magnitude(clip: AudioClip, params: StftParams) -> MagnitudeSpectrogram:
    if clip.sample_rate != params.sample_rate:
        raise ConfigError(f"clip is {clip.sample_rate} Hz, STFT config expects {params.sample_rate} Hz")
    mags, _ = split(stft(clip, params.fft_size, params.hop))
    return mags
