"""Maximum-likelihood training of one Glow prior per instrument."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from flowsep.audio import load_manifest, load_wav, resample, segment_nonsilent
from flowsep.errors import ConfigError, DatasetError, NumericError
from flowsep.flow.checkpoint import load_model, read_container, save_model
from flowsep.flow.glow import GlowConfig, GlowModel, backward, glow_inverse
from flowsep.flow.layers import LOG_2PI
from flowsep.spectral import MagnitudeSpectrogram, StftParams, magnitude

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 1000
    batch_size: int = 8
    seed: int = 0
    segment_seconds: float = 5.0
    rms_floor_db: float = -60.0
    checkpoint_interval: int = 100  # epochs
    max_steps: Optional[int] = None
    clip_grad_norm: float = 100.0
    sample_rate: int = 22050
    fft_size: int = 1024
    hop: int = 256
    n_steps: int = 12
    hidden: int = 64
    depth: int = 4
    kernel: int = 3
    actnorm_floor: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be at least 1")

    @property
    def stft(self) -> StftParams:
        return StftParams(self.fft_size, self.hop, "hann", self.sample_rate)

    def glow_config(self) -> GlowConfig:
        return GlowConfig(channels=self.fft_size // 2 + 1, n_steps=self.n_steps, hidden=self.hidden,
                          depth=self.depth, kernel=self.kernel, seed=self.seed,
                          actnorm_floor=self.actnorm_floor)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState({k: t.clone() for k, t in self.m.items()},
                         {k: t.clone() for k, t in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


@torch.no_grad()
def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam update, in place on ``params`` (name -> tensor)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return params


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


def _file_segments(path: str, config: TrainConfig) -> list:
    clip = resample(load_wav(path), config.sample_rate)
    return segment_nonsilent(clip, config.segment_seconds, config.rms_floor_db)


def build_dataset(manifest, instrument: str, config: TrainConfig = TrainConfig()) -> list:
    """Load, resample, segment and transform every file listed for ``instrument``."""
    if not isinstance(manifest, dict):
        manifest = load_manifest(manifest)
    files = manifest.get(instrument)
    if not files:
        raise DatasetError(f"manifest lists no files for instrument {instrument!r}")
    items = []
    for path in files:
        for seg in _file_segments(path, config):
            items.append(magnitude(seg, config.stft).trimmed_even())
    if not items:
        raise DatasetError(f"no non-silent {config.segment_seconds}s segments found for {instrument!r}")
    return items


def stack(batch) -> torch.Tensor:
    arrays = [b.mags if isinstance(b, MagnitudeSpectrogram) else np.asarray(b) for b in batch]
    return torch.as_tensor(np.stack(arrays), dtype=torch.float32)


def _as_batch(batch, model) -> torch.Tensor:
    if torch.is_tensor(batch):
        x = batch if batch.dim() == 3 else batch[None]
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        x = stack(batch)
    return x.to(model.dtype)


def _per_item_nll(z, logdet) -> torch.Tensor:
    d = z[0].numel()
    return (0.5 * d * LOG_2PI + 0.5 * z.pow(2).flatten(1).sum(1) - logdet) / d


def nll_loss(batch, model: GlowModel) -> float:
    """Mean per-dimension negative log-likelihood (nats) over the batch."""
    x = _as_batch(batch, model)
    z, logdet = glow_inverse(x, model)
    nll = _per_item_nll(z, logdet)
    _check_finite(nll)
    return float(nll.mean())


def _check_finite(nll):
    bad = (~torch.isfinite(nll)).nonzero()
    if len(bad):
        raise NumericError(f"non-finite loss for batch item {int(bad[0])}")


def nll_loss_and_grads(batch, model: GlowModel):
    """Loss plus parameter gradients, via the recorded tape."""
    x = _as_batch(batch, model)
    z, logdet, tape = glow_inverse(x, model, tape=True)
    nll = _per_item_nll(z, logdet)
    _check_finite(nll)
    b, d = z.shape[0], z[0].numel()
    _, grads = backward(z / (b * d), model, tape, logdet_grad=-1.0 / (b * d))
    return float(nll.mean()), grads


def _dataset_stats(data: torch.Tensor) -> dict:
    return {"segments": int(data.shape[0]), "shape": list(data.shape[1:]),
            "mean": float(data.mean()), "std": float(data.std()), "max": float(data.max())}


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def _write_loss_csv(path: Path, rows: list, header: Optional[str] = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "epoch", "nll"])
        for step, epoch, nll in rows:
            w.writerow([step, epoch, repr(nll)])


def _save(path, model, state: AdamState, config: TrainConfig, rows, position, provenance):
    extra = {}
    for name in state.m:
        extra[f"adam.m.{name}"] = state.m[name]
        extra[f"adam.v.{name}"] = state.v[name]
    record = {"epoch": position[0], "offset": position[1], "step": state.step, "loss_curve": [r[2] for r in rows],
              "loss_epochs": [r[1] for r in rows]}
    save_model(path, model, extra, {"train_config": config.to_dict(), "training": record,
                                    "adam": {"step": state.step, "beta1": state.beta1,
                                             "beta2": state.beta2, "eps": state.eps},
                                    "provenance": provenance or {}})


def train_on_tensor(data: torch.Tensor, config: TrainConfig, instrument: str, out_dir,
                    resume: Optional[str] = None, provenance: Optional[dict] = None,
                    extra_metadata: Optional[dict] = None, loss_header: Optional[str] = None) -> Path:
    """Train on a preassembled ``[N, C, T]`` tensor of magnitudes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = data.shape[0]
    stft = config.stft
    if data.shape[1] != stft.freq_bins:
        raise ConfigError(f"data has {data.shape[1]} bins, STFT config implies {stft.freq_bins}")

    rows = []
    epoch, offset = 0, 0
    state = AdamState()
    if resume:
        model, meta, extra = load_model(resume)
        rec = meta["training"]
        rows = [(i + 1, e, l) for i, (e, l) in enumerate(zip(rec["loss_epochs"], rec["loss_curve"]))]
        epoch, offset = rec["epoch"], rec["offset"]
        state.step = meta["adam"]["step"]
        for key, arr in extra.items():
            kind, _, name = key.partition(".")[2].partition(".")
            (state.m if kind == "m" else state.v)[name] = torch.from_numpy(arr).to(model.dtype)
    else:
        meta_info = {"instrument": instrument, "stft": stft.to_dict(), "input_shape": list(data.shape[1:]),
                     "dataset": _dataset_stats(data), "clip_grad_norm": config.clip_grad_norm}
        meta_info.update(extra_metadata or {})
        model = GlowModel(config.glow_config(), meta_info)
        first = data[torch.as_tensor(_epoch_order(config.seed, 0, n)[:config.batch_size])]
        model.data_init(first)

    model.train()
    params = dict(model.named_parameters())
    loss_csv = out_dir / f"{instrument}_loss.csv"

    def save(path):
        _save(path, model, state, config, rows, (epoch, offset), provenance)

    while epoch < config.epochs:
        if config.max_steps is not None and state.step >= config.max_steps:
            break
        order = _epoch_order(config.seed, epoch, n)
        idx = torch.as_tensor(order[offset:offset + config.batch_size])
        try:
            loss, grads = nll_loss_and_grads(data[idx], model)
        except NumericError:
            _write_loss_csv(loss_csv, rows, loss_header)
            log.error("non-finite loss at step %d; keeping previous checkpoints", state.step + 1)
            raise
        clip_by_global_norm(grads, config.clip_grad_norm)
        adam_step(params, grads, state, config.learning_rate)
        rows.append((state.step, epoch, loss))
        offset += config.batch_size
        if offset >= n:
            epoch, offset = epoch + 1, 0
            if epoch % config.checkpoint_interval == 0 and epoch < config.epochs:
                save(out_dir / f"{instrument}_epoch{epoch:04d}.iglw")
                log.info("epoch %d nll %.4f", epoch, loss)

    model.eval()
    final = out_dir / f"{instrument}.iglw"
    save(final)
    _write_loss_csv(loss_csv, rows, loss_header)
    return final


def train(config: TrainConfig, manifest, instrument: str, out_dir, resume: Optional[str] = None,
          provenance: Optional[dict] = None, loss_header: Optional[str] = None) -> Path:
    """Build the dataset for ``instrument`` and train; returns the final checkpoint path."""
    items = build_dataset(manifest, instrument, config)
    return train_on_tensor(stack(items), config, instrument, out_dir, resume, provenance,
                           loss_header=loss_header)


def training_record(path) -> dict:
    meta, _ = read_container(path)
    return meta.get("training", {})
