"""Synthetic band-limited "instruments" for desk-scale end-to-end checks."""

from __future__ import annotations

import numpy as np

from flowsep.audio import AudioClip

TOY_BANDS = {"low": (0.0, 2000.0), "high": (4000.0, 8000.0)}


def band_noise(seconds: float, sample_rate: int, lo_hz: float, hi_hz: float,
               rng: np.random.Generator, level_db=(-24.0, -18.0), label=None) -> AudioClip:
    """Gaussian noise brick-wall filtered to ``[lo_hz, hi_hz)`` at a random RMS level."""
    n = int(round(seconds * sample_rate))
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < lo_hz) | (freqs >= hi_hz)] = 0.0
    x = np.fft.irfft(spec, n)
    target_rms = 10.0 ** (rng.uniform(*level_db) / 20.0)
    x *= target_rms / np.sqrt(np.mean(x * x))
    return AudioClip(np.clip(x, -1.0, 1.0).astype(np.float32), sample_rate, label)


def toy_clips(band: str, count: int, seconds: float, sample_rate: int, seed: int) -> list:
    lo, hi = TOY_BANDS[band]
    rng = np.random.default_rng([seed, sum(map(ord, band))])
    return [band_noise(seconds, sample_rate, lo, hi, rng, label=band) for _ in range(count)]


def toy_train_config(**overrides):
    """A reduced architecture and STFT that trains a toy prior on CPU in under a minute."""
    from flowsep.training import TrainConfig

    base = dict(learning_rate=1e-4, epochs=100_000, batch_size=8, max_steps=400, segment_seconds=1.0,
                sample_rate=22050, fft_size=256, hop=64, n_steps=4, hidden=32, depth=3,
                checkpoint_interval=100_000)
    base.update(overrides)
    return TrainConfig(**base)
