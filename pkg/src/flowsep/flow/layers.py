"""Invertible layers used by the Glow prior.

Every layer's ``forward`` runs in the normalizing direction (data -> latent)
and returns ``(y, logdet)`` with one log-determinant per batch item.
``inverse`` undoes it and returns the log-determinant of the inverse map.
All tensors are ``[batch, channels, time]``.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn

from flowsep.errors import ShapeError


def squeeze(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    """Fold ``factor`` adjacent frames into channels: ``[B, C, T] -> [B, factor*C, T/factor]``.

    Output channel ``p*C + c`` holds frames ``t`` with ``t % factor == p``.
    """
    b, c, t = x.shape
    if t % factor:
        raise ShapeError(f"time length {t} is not divisible by squeeze factor {factor}")
    return x.reshape(b, c, t // factor, factor).permute(0, 3, 1, 2).reshape(b, factor * c, t // factor)


def unsqueeze(x: torch.Tensor, factor: int = 2) -> torch.Tensor:
    b, c, t = x.shape
    if c % factor:
        raise ShapeError(f"channel count {c} is not divisible by squeeze factor {factor}")
    return x.reshape(b, factor, c // factor, t).permute(0, 2, 3, 1).reshape(b, c // factor, t * factor)


class ActNorm(nn.Module):
    """Per-channel affine map ``y = exp(log_scale) * (x + bias)``."""

    def __init__(self, channels: int, eps: float = 1e-6, rel_floor: float = 0.0):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("initialized", torch.tensor(0, dtype=torch.uint8))
        self.eps = eps
        self.rel_floor = rel_floor

    @torch.no_grad()
    def data_init(self, x: torch.Tensor) -> None:
        """Zero mean, unit variance per channel on ``x``.

        Channel stds are floored at ``rel_floor`` times the mean channel std, so
        near-constant channels do not get huge initial scales.
        """
        mean = x.mean(dim=(0, 2))
        std = (x - mean[None, :, None]).pow(2).mean(dim=(0, 2)).sqrt()
        if self.rel_floor > 0:
            std = std.clamp_min(self.rel_floor * float(std.mean()))
        self.bias.copy_(-mean)
        self.log_scale.copy_(-torch.log(std + self.eps))
        self.initialized.fill_(1)

    def _check(self):
        if self.training and not bool(self.initialized):
            raise RuntimeError("ActNorm used in training before data-dependent initialisation")

    def forward(self, x):
        self._check()
        y = (x + self.bias[None, :, None]) * torch.exp(self.log_scale)[None, :, None]
        logdet = x.shape[2] * self.log_scale.sum()
        return y, logdet.expand(x.shape[0])

    def inverse(self, y):
        self._check()
        x = y * torch.exp(-self.log_scale)[None, :, None] - self.bias[None, :, None]
        logdet = -y.shape[2] * self.log_scale.sum()
        return x, logdet.expand(y.shape[0])


class InvConv1x1(nn.Module):
    """Channel-mixing ``y[:, :, t] = W x[:, :, t]`` with ``W = P L (U + diag(sign * exp(log_s)))``.

    ``P`` is fixed, ``L`` unit lower triangular, ``U`` strictly upper
    triangular, so ``log|det W| = sum(log_s)`` holds by construction.
    """

    def __init__(self, channels: int, generator: torch.Generator | None = None):
        super().__init__()
        q, _ = torch.linalg.qr(torch.randn(channels, channels, generator=generator, dtype=torch.float64))
        self._set_from_weight(q.numpy())

    @classmethod
    def from_weight(cls, weight) -> "InvConv1x1":
        weight = np.asarray(weight, dtype=np.float64)
        self = cls.__new__(cls)
        nn.Module.__init__(self)
        self._set_from_weight(weight)
        return self

    def _set_from_weight(self, weight: np.ndarray):
        c = weight.shape[0]
        p, lower, upper = scipy.linalg.lu(weight)
        diag = np.diag(upper)
        if np.any(diag == 0):
            raise ValueError("weight matrix is singular")
        t = lambda a: torch.as_tensor(a, dtype=torch.float32)
        self.register_buffer("perm", t(p))
        self.register_buffer("sign_s", t(np.sign(diag)))
        self.register_buffer("lower_mask", t(np.tril(np.ones((c, c)), -1)))
        self.register_buffer("eye", t(np.eye(c)))
        self.lower = nn.Parameter(t(np.tril(lower, -1)))
        self.upper = nn.Parameter(t(np.triu(upper, 1)))
        self.log_s = nn.Parameter(t(np.log(np.abs(diag))))

    def _factors(self):
        lower = self.lower * self.lower_mask + self.eye
        upper = self.upper * self.lower_mask.T + torch.diag(self.sign_s * torch.exp(self.log_s))
        return lower, upper

    def weight(self) -> torch.Tensor:
        lower, upper = self._factors()
        return self.perm @ lower @ upper

    def forward(self, x):
        y = torch.einsum("ij,bjt->bit", self.weight(), x)
        logdet = x.shape[2] * self.log_s.sum()
        return y, logdet.expand(x.shape[0])

    def inverse(self, y):
        b, c, t = y.shape
        lower, upper = self._factors()
        rhs = (self.perm.T @ y.permute(1, 0, 2).reshape(c, b * t))
        a = torch.linalg.solve_triangular(lower, rhs, upper=False, unitriangular=True)
        x = torch.linalg.solve_triangular(upper, a, upper=True)
        x = x.reshape(c, b, t).permute(1, 0, 2)
        logdet = -t * self.log_s.sum()
        return x, logdet.expand(b)


class CouplingNet(nn.Module):
    """Gated dilated 1-D convolution stack (WaveNet-style, no conditioning)."""

    def __init__(self, in_channels: int, out_channels: int, hidden: int = 64, depth: int = 4,
                 kernel: int = 3):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError("kernel size must be odd")
        self.hidden = hidden
        self.start = nn.Conv1d(in_channels, hidden, 1)
        self.in_layers = nn.ModuleList()
        self.res_skip = nn.ModuleList()
        for i in range(depth):
            dilation = 2 ** i
            self.in_layers.append(nn.Conv1d(hidden, 2 * hidden, kernel, dilation=dilation,
                                            padding=dilation * (kernel - 1) // 2))
            self.res_skip.append(nn.Conv1d(hidden, 2 * hidden if i < depth - 1 else hidden, 1))
        self.end = nn.Conv1d(hidden, out_channels, 1)
        nn.init.zeros_(self.end.weight)
        nn.init.zeros_(self.end.bias)

    def forward(self, x):
        h = self.start(x)
        skip = 0
        last = len(self.in_layers) - 1
        for i, (conv, rs) in enumerate(zip(self.in_layers, self.res_skip)):
            a, b = conv(h).chunk(2, dim=1)
            out = rs(torch.tanh(a) * torch.sigmoid(b))
            if i < last:
                h = h + out[:, :self.hidden]
                skip = skip + out[:, self.hidden:]
            else:
                skip = skip + out
        return self.end(skip)


class AffineCoupling(nn.Module):
    """``y_b = x_b * exp(log_s) + t`` with ``(log_s, t) = net(x_a)``; ``x_a`` passes through."""

    def __init__(self, channels: int, hidden: int = 64, depth: int = 4, kernel: int = 3):
        super().__init__()
        if channels % 2:
            raise ShapeError(f"coupling needs an even channel count, got {channels}")
        self.half = channels // 2
        self.net = CouplingNet(self.half, 2 * self.half, hidden, depth, kernel)

    def _split(self, x):
        if x.shape[1] != 2 * self.half:
            raise ShapeError(f"expected {2 * self.half} channels, got {x.shape[1]}")
        return x[:, :self.half], x[:, self.half:]

    def forward(self, x):
        xa, xb = self._split(x)
        log_s, t = self.net(xa).chunk(2, dim=1)
        yb = xb * torch.exp(log_s) + t
        return torch.cat([xa, yb], dim=1), log_s.sum(dim=(1, 2))

    def inverse(self, y):
        ya, yb = self._split(y)
        log_s, t = self.net(ya).chunk(2, dim=1)
        xb = (yb - t) * torch.exp(-log_s)
        return torch.cat([ya, xb], dim=1), -log_s.sum(dim=(1, 2))


class FlowStep(nn.Module):
    def __init__(self, channels: int, hidden: int, depth: int, kernel: int,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.actnorm = ActNorm(channels)
        self.invconv = InvConv1x1(channels, generator)
        self.coupling = AffineCoupling(channels, hidden, depth, kernel)

    def forward(self, x):
        x, ld1 = self.actnorm(x)
        x, ld2 = self.invconv(x)
        x, ld3 = self.coupling(x)
        return x, ld1 + ld2 + ld3

    def inverse(self, y):
        y, ld3 = self.coupling.inverse(y)
        y, ld2 = self.invconv.inverse(y)
        y, ld1 = self.actnorm.inverse(y)
        return y, ld1 + ld2 + ld3


LOG_2PI = math.log(2.0 * math.pi)


def standard_normal_logpdf(z: torch.Tensor) -> torch.Tensor:
    """Per-item ``log N(z; 0, I)`` summed over all non-batch dims."""
    d = z[0].numel()
    return -0.5 * d * LOG_2PI - 0.5 * z.pow(2).flatten(1).sum(dim=1)

