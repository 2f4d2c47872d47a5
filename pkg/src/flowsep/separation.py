"""Mixture separation by gradient descent over the latent codes of per-source priors.

The minimised objective is

    L(z_1..z_n) = D_KL(x || sum_i f_i(z_i)) - gamma * sum_i log p_i(f_i(z_i))

where ``D_KL`` is the generalized KL divergence on magnitudes. MLE mode drops
the prior term (gamma = 0); MAP mode keeps it with weight gamma.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from flowsep.audio import AudioClip
from flowsep.errors import ConfigError, NumericError, ShapeError
from flowsep.flow.glow import GlowModel, backward, glow_forward
from flowsep.flow.layers import standard_normal_logpdf
from flowsep.spectral import (
    MagnitudeSpectrogram,
    PhaseSpectrogram,
    StftParams,
    istft_with_phase,
    split,
    stft,
)
from flowsep.training import AdamState, adam_step

log = logging.getLogger(__name__)

MODES = ("mle", "map")


@dataclass
class SeparationConfig:
    mode: str = "mle"
    gamma: Optional[float] = None  # None -> 0 for MLE, 1 for MAP
    learning_rate: float = 0.01
    iterations: int = 150
    chunk_seconds: float = 60.0
    seed: int = 0
    epsilon_floor: float = 1e-8
    soft_mask: bool = False
    workers: int = 1

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "mle":
            if self.gamma:
                log.warning("gamma=%s is ignored in MLE mode; using 0", self.gamma)
            self.gamma = 0.0
        elif self.gamma is None:
            self.gamma = 1.0
        self.gamma = float(self.gamma)
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.epsilon_floor <= 0:
            raise ConfigError("epsilon_floor must be positive")
        if self.chunk_seconds <= 0:
            raise ConfigError("chunk_seconds must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ObjectiveReport:
    kl_term: float
    prior_terms: list
    total: float
    gamma: float = 0.0


@dataclass
class ChunkResult:
    stems: list
    magnitudes: list
    trace: list
    seconds_per_iteration: float
    latents: list = field(default_factory=list)


@dataclass
class SeparationResult:
    stems: list
    chunks: list

    @property
    def final_report(self) -> Optional[ObjectiveReport]:
        traced = [c for c in self.chunks if c.trace]
        return traced[-1].trace[-1] if traced else None

    @property
    def magnitudes(self) -> list:
        return [c.magnitudes for c in self.chunks]

    @property
    def seconds_per_iteration(self) -> float:
        times = [c.seconds_per_iteration for c in self.chunks if c.trace]
        return float(np.mean(times)) if times else 0.0


def _mags(a) -> np.ndarray:
    if isinstance(a, MagnitudeSpectrogram):
        return a.mags
    if torch.is_tensor(a):
        return a.detach().cpu().numpy()
    return np.asarray(a)


def generalized_kl(x, s_hat, eps: float = 1e-8) -> float:
    """``sum x ln(x / max(s, eps)) - x + max(s, eps)``; cells with ``x = 0`` contribute ``max(s, eps)``."""
    x = np.asarray(_mags(x), dtype=np.float64)
    s = np.asarray(_mags(s_hat), dtype=np.float64)
    if x.shape != s.shape:
        raise ShapeError(f"mixture {x.shape} and estimate {s.shape} differ in shape")
    s = np.maximum(s, eps)
    pos = x > 0
    terms = s.copy()
    terms[pos] = x[pos] * np.log(x[pos] / s[pos]) - x[pos] + s[pos]
    return float(terms.sum())


def generalized_kl_grad(x, s_hat, eps: float = 1e-8):
    """Elementwise derivative in ``s_hat``: ``1 - x / s`` above the floor, 0 below it."""
    if torch.is_tensor(s_hat):
        x = torch.as_tensor(x, dtype=s_hat.dtype)
        return torch.where(s_hat > eps, 1.0 - x / s_hat.clamp_min(eps), torch.zeros_like(s_hat))
    x, s = np.asarray(x, dtype=np.float64), np.asarray(s_hat, dtype=np.float64)
    return np.where(s > eps, 1.0 - x / np.maximum(s, eps), 0.0)


def _kl_torch(x: torch.Tensor, s: torch.Tensor, eps: float) -> float:
    s = s.double().clamp_min(eps)
    x = x.double()
    terms = torch.where(x > 0, torch.xlogy(x, x) - x * torch.log(s) - x + s, s)
    return float(terms.sum())


def objective(z_list, mixture_mag, models: Sequence[GlowModel], config: SeparationConfig):
    """Evaluate the separation objective and its gradient for every latent."""
    if len(z_list) != len(models):
        raise ShapeError(f"{len(z_list)} latents for {len(models)} models")
    x = torch.as_tensor(_mags(mixture_mag))
    outputs = []
    for z, model in zip(z_list, models):
        s, logdet, tape = glow_forward(z, model, tape=True)
        outputs.append((s, logdet, tape))
    x = x.to(outputs[0][0].dtype)
    if outputs[0][0].shape != x.shape:
        raise ShapeError(f"generator output {tuple(outputs[0][0].shape)} vs mixture {tuple(x.shape)}")
    s_hat = outputs[0][0]
    for s, _, _ in outputs[1:]:
        s_hat = s_hat + s
    kl = _kl_torch(x, s_hat, config.epsilon_floor)
    grad_s = generalized_kl_grad(x, s_hat, config.epsilon_floor)

    priors, grads = [], []
    for i, ((s, logdet, tape), z, model) in enumerate(zip(outputs, z_list, models)):
        z = torch.as_tensor(z, dtype=s.dtype)
        prior = float(standard_normal_logpdf(z[None])[0]) - float(logdet)
        if not np.isfinite(prior):
            raise NumericError(f"non-finite prior term for source {i} "
                               f"({model.metadata.get('instrument', i)})")
        priors.append(prior)
        if config.mode == "map":
            # d/dz [-gamma (log N(z) - logdet)] = gamma z + gamma dlogdet/dz
            g, _ = _latent_backward(grad_s, model, tape, config.gamma)
            g = g + config.gamma * z
        else:
            g, _ = _latent_backward(grad_s, model, tape, 0.0)
        grads.append(g)

    if config.mode == "map":
        total = kl - config.gamma * sum(priors)
    else:
        total = kl
    if not np.isfinite(total):
        bad = next((i for i, g in enumerate(grads) if not torch.isfinite(g).all()), 0)
        raise NumericError(f"non-finite objective (source {bad})")
    return ObjectiveReport(kl, priors, total, config.gamma), grads


def _latent_backward(grad_s, model, tape, logdet_grad):
    return backward(grad_s, model, tape, logdet_grad=logdet_grad, with_params=False)


def _model_stft(model: GlowModel) -> Optional[StftParams]:
    d = model.metadata.get("stft")
    return StftParams.from_dict(d) if d else None


def check_stft(models: Sequence[GlowModel], params: StftParams) -> None:
    for i, model in enumerate(models):
        mp = _model_stft(model)
        if mp is not None and mp != params:
            raise ConfigError(f"model {i} ({model.metadata.get('instrument', '?')}) was trained with "
                              f"STFT {mp.to_dict()}, input uses {params.to_dict()}")
        if model.config.channels != params.freq_bins:
            raise ConfigError(f"model {i} expects {model.config.channels} bins, input has {params.freq_bins}")


def _labels(models):
    return [m.metadata.get("instrument", f"source{i}") for i, m in enumerate(models)]


def separate_chunk(mixture_mag: MagnitudeSpectrogram, mixture_phase: PhaseSpectrogram,
                   models: Sequence[GlowModel], config: SeparationConfig,
                   out_len: Optional[int] = None) -> ChunkResult:
    """Optimise all latents jointly from zero, then resynthesise with the mixture phase."""
    if not models:
        raise ConfigError("need at least one model")
    check_stft(models, mixture_mag.params)
    mags = mixture_mag.mags
    frames = mags.shape[1]
    if frames % 2:
        # odd frame count: replicate the last frame for the optimisation, drop it afterwards
        mags = np.concatenate([mags, mags[:, -1:]], axis=1)
    dtype = models[0].dtype
    x = torch.as_tensor(mags, dtype=dtype)
    z = {f"z{i}": torch.zeros(m.latent_shape(mags.shape[1]), dtype=dtype) for i, m in enumerate(models)}
    assert all(not bool(t.any()) for t in z.values()), "latents must start at zero"

    state = AdamState()
    trace = []
    t0 = time.perf_counter()
    for _ in range(config.iterations):
        report, grads = objective(list(z.values()), x, models, config)
        trace.append(report)
        adam_step(z, {k: g for k, g in zip(z, grads)}, state, config.learning_rate)
    elapsed = time.perf_counter() - t0
    report, _ = objective(list(z.values()), x, models, config)
    trace.append(report)

    estimates = [glow_forward(zi, m)[0].cpu().numpy().astype(np.float64)[:, :frames]
                 for zi, m in zip(z.values(), models)]
    estimates = [np.maximum(e, 0.0) for e in estimates]
    if config.soft_mask:
        denom = np.maximum(sum(estimates), config.epsilon_floor)
        estimates = [mixture_mag.mags * e / denom for e in estimates]

    if out_len is None:
        out_len = (frames - 1) * mixture_mag.params.hop
    stems = []
    for est, label in zip(estimates, _labels(models)):
        stem_mag = MagnitudeSpectrogram(est, mixture_mag.params)
        stems.append(istft_with_phase(stem_mag, mixture_phase, out_len, label))
    return ChunkResult(stems, estimates, trace,
                       elapsed / config.iterations if config.iterations else 0.0,
                       [t.clone() for t in z.values()])


def chunk_bounds(n_samples: int, sample_rate: int, chunk_seconds: float) -> list:
    width = int(round(chunk_seconds * sample_rate))
    return [(lo, min(lo + width, n_samples)) for lo in range(0, n_samples, width)]


def separate(mixture: AudioClip, models: Sequence[GlowModel],
             config: SeparationConfig = SeparationConfig()) -> SeparationResult:
    """Separate a full mixture chunk by chunk and stitch the stems back together."""
    if not models:
        raise ConfigError("need at least one model")
    params = _model_stft(models[0]) or StftParams(sample_rate=mixture.sample_rate)
    if mixture.sample_rate != params.sample_rate:
        raise ConfigError(f"mixture is {mixture.sample_rate} Hz, models expect {params.sample_rate} Hz")
    check_stft(models, params)
    bounds = chunk_bounds(len(mixture), mixture.sample_rate, config.chunk_seconds)

    def work(bound):
        lo, hi = bound
        n = hi - lo
        if n < params.fft_size:
            log.warning("chunk [%d, %d) is shorter than one FFT frame; emitting zeros", lo, hi)
            zeros = [AudioClip(np.zeros(n, np.float32), mixture.sample_rate, lb) for lb in _labels(models)]
            return ChunkResult(zeros, [], [], 0.0)
        piece = AudioClip(mixture.samples[lo:hi], mixture.sample_rate)
        mag, phase = split(stft(piece, params.fft_size, params.hop))
        return separate_chunk(mag, phase, models, config, out_len=n)

    if config.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            chunks = list(pool.map(work, bounds))
    else:
        chunks = [work(b) for b in bounds]

    stems = []
    for i, label in enumerate(_labels(models)):
        parts = [c.stems[i].samples for c in chunks]
        samples = np.concatenate(parts) if parts else np.zeros(0, np.float32)
        stems.append(AudioClip(samples, mixture.sample_rate, label))
    return SeparationResult(stems, chunks)


def write_trace(path, result: SeparationResult, labels: Sequence[str], header: Optional[str] = None) -> None:
    """CSV rows ``chunk, iteration, kl, prior_<label>..., total``."""
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chunk", "iteration", "kl"] + [f"prior_{lb}" for lb in labels] + ["total"])
        for c, chunk in enumerate(result.chunks):
            for it, rep in enumerate(chunk.trace):
                w.writerow([c, it, repr(rep.kl_term)] + [repr(p) for p in rep.prior_terms] + [repr(rep.total)])
