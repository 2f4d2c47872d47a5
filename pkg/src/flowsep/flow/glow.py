"""Single-scale Glow generator: squeeze, a stack of flow steps, unsqueeze.

The generator ``f`` maps a latent ``z`` (squeezed shape ``[2C, T/2]``) to a
magnitude grid ``s`` of shape ``[C, T]``. Training and likelihood evaluation
run the other way, through each step's normalizing ``forward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from flowsep.errors import NumericError, ShapeError, StaleTapeError
from flowsep.flow.layers import FlowStep, LOG_2PI, squeeze, standard_normal_logpdf, unsqueeze


@dataclass(frozen=True)
class GlowConfig:
    channels: int = 513
    n_steps: int = 12
    hidden: int = 64
    depth: int = 4
    kernel: int = 3
    squeeze_factor: int = 2
    seed: int = 0
    actnorm_floor: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "GlowConfig":
        kw = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**{k: (float(v) if k == "actnorm_floor" else int(v)) for k, v in kw.items()})


class GlowModel(nn.Module):
    def __init__(self, config: GlowConfig = GlowConfig(), metadata: dict | None = None):
        super().__init__()
        self.config = config
        self.metadata = dict(metadata or {})
        flow_channels = config.channels * config.squeeze_factor
        gen = torch.Generator().manual_seed(config.seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.steps = nn.ModuleList(
                FlowStep(flow_channels, config.hidden, config.depth, config.kernel, gen)
                for _ in range(config.n_steps)
            )
        # data-dependent actnorm init only happens in training; start in eval mode
        self.eval()

    @property
    def latent_channels(self) -> int:
        return self.config.channels * self.config.squeeze_factor

    @property
    def dtype(self):
        return self.steps[0].actnorm.bias.dtype if len(self.steps) else torch.float32

    def latent_shape(self, frames: int) -> tuple:
        return (self.latent_channels, frames // self.config.squeeze_factor)

    def _check_data(self, s):
        if s.shape[1] != self.config.channels:
            raise ShapeError(f"model expects {self.config.channels} channels, got {s.shape[1]}")
        if s.shape[2] % self.config.squeeze_factor:
            raise ShapeError(f"time length {s.shape[2]} must be a multiple of {self.config.squeeze_factor}")

    def _check_latent(self, z):
        if z.shape[1] != self.latent_channels:
            raise ShapeError(f"latent expects {self.latent_channels} channels, got {z.shape[1]}")

    def encode(self, s: torch.Tensor, check_finite: bool = True):
        """``z = f^-1(s)`` and ``log|det d f^-1 / d s|`` per batch item."""
        self._check_data(s)
        x = squeeze(s, self.config.squeeze_factor)
        total = torch.zeros(s.shape[0], dtype=s.dtype, device=s.device)
        for step in self.steps:
            x, ld = step(x)
            total = total + ld
        if check_finite and not (torch.isfinite(total).all() and torch.isfinite(x).all()):
            raise NumericError(f"non-finite activation after flow step {self._first_bad_step(s)}")
        return x, total

    @torch.no_grad()
    def _first_bad_step(self, s) -> int:
        x = squeeze(s, self.config.squeeze_factor)
        for k, step in enumerate(self.steps):
            x, ld = step(x)
            if not (torch.isfinite(x).all() and torch.isfinite(ld).all()):
                return k
        return len(self.steps) - 1

    def generate(self, z: torch.Tensor):
        """``s = f(z)`` and ``log|det d f / d z|`` per batch item."""
        self._check_latent(z)
        x = z
        total = torch.zeros(z.shape[0], dtype=z.dtype, device=z.device)
        for step in reversed(self.steps):
            x, ld = step.inverse(x)
            total = total + ld
        return unsqueeze(x, self.config.squeeze_factor), total

    def log_likelihood(self, s: torch.Tensor) -> torch.Tensor:
        z, logdet = self.encode(s)
        return standard_normal_logpdf(z) + logdet

    @torch.no_grad()
    def data_init(self, s: torch.Tensor) -> None:
        """Initialise every actnorm from the activations a batch produces at its input."""
        self._check_data(s)
        x = squeeze(s, self.config.squeeze_factor)
        for step in self.steps:
            step.actnorm.rel_floor = self.config.actnorm_floor
            step.actnorm.data_init(x)
            x, _ = step(x)


def _batched(x: torch.Tensor):
    if x.dim() == 2:
        return x[None], True
    if x.dim() != 3:
        raise ShapeError(f"expected [C, T] or [B, C, T], got {tuple(x.shape)}")
    return x, False


def _as_tensor(x, model):
    if not torch.is_tensor(x):
        x = torch.as_tensor(x)
    return x.to(model.dtype)


@dataclass
class Tape:
    """Autograd record of one forward evaluation, consumed by :func:`backward`."""

    inputs: torch.Tensor
    output: torch.Tensor
    logdet: torch.Tensor
    params: list
    versions: tuple
    unbatched: bool
    consumed: bool = field(default=False)

    def is_stale(self) -> bool:
        return self.consumed or tuple(p._version for _, p in self.params) != self.versions


def _run(fn, x, model, tape: bool):
    x, unbatched = _batched(_as_tensor(x, model))
    if not tape:
        with torch.no_grad():
            y, ld = fn(x)
        return (y[0], ld[0]) if unbatched else (y, ld)
    x = x.detach().requires_grad_(True)
    with torch.enable_grad():
        y, ld = fn(x)
    params = list(model.named_parameters())
    record = Tape(x, y, ld, params, tuple(p._version for _, p in params), unbatched)
    out_y, out_ld = y.detach(), ld.detach()
    if unbatched:
        out_y, out_ld = out_y[0], out_ld[0]
    return out_y, out_ld, record


def glow_forward(z, model: GlowModel, tape: bool = False):
    """Generator direction. Returns ``(s, logdet)`` or ``(s, logdet, tape)``."""
    return _run(model.generate, z, model, tape)


def glow_inverse(s, model: GlowModel, tape: bool = False):
    """Normalizing direction. Returns ``(z, logdet_inverse)`` or with a tape."""
    return _run(model.encode, s, model, tape)


def log_likelihood(s, model: GlowModel):
    """Exact ``log p(s)`` via change of variables; a float for ``[C, T]`` input."""
    s, unbatched = _batched(_as_tensor(s, model))
    with torch.no_grad():
        ll = model.log_likelihood(s)
    return float(ll[0]) if unbatched else ll


def backward(objective_grad, model: GlowModel, tape: Tape, logdet_grad=0.0, with_params: bool = True):
    """Reverse-mode pass through a recorded evaluation.

    ``objective_grad`` is dL/d(output) and ``logdet_grad`` dL/d(logdet) (scalar
    or per batch item). Returns ``(dL/d(input), {param name: dL/d(param)})``.
    A tape can be used once, and not after the model's parameters changed.
    ``with_params=False`` skips parameter gradients and returns an empty dict.
    """
    if tape.is_stale():
        raise StaleTapeError("tape was already consumed or the model parameters changed since it was recorded")
    own = [p for _, p in model.named_parameters()]
    if len(own) != len(tape.params) or any(a is not b for a, (_, b) in zip(own, tape.params)):
        raise StaleTapeError("tape was recorded on a different model")
    out_grad = _as_tensor(objective_grad, model)
    if tape.unbatched and out_grad.dim() == tape.output.dim() - 1:
        out_grad = out_grad[None]
    ld_grad = torch.as_tensor(logdet_grad, dtype=tape.logdet.dtype).expand_as(tape.logdet)
    tensors = [tape.inputs] + ([p for _, p in tape.params] if with_params else [])
    grads = torch.autograd.grad([tape.output, tape.logdet], tensors, grad_outputs=[out_grad, ld_grad],
                                allow_unused=True)
    tape.consumed = True
    grad_in = grads[0]
    if tape.unbatched:
        grad_in = grad_in[0]
    grad_params = {}
    for (name, p), g in zip(tape.params if with_params else [], grads[1:]):
        grad_params[name] = torch.zeros_like(p) if g is None else g
    return grad_in, grad_params


__all__ = [
    "GlowConfig", "GlowModel", "Tape", "backward", "glow_forward", "glow_inverse",
    "log_likelihood", "LOG_2PI",
]
