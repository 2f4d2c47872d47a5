"""Independent numerical oracles and model fixtures shared by the tests."""

from __future__ import annotations

import numpy as np
import torch

from flowsep.flow.glow import GlowConfig, GlowModel


def randomized_model(channels=4, n_steps=2, hidden=8, depth=2, kernel=3, seed=0, scale=0.1,
                     dtype=torch.float64) -> GlowModel:
    """A model whose every parameter is moved off its identity initialisation."""
    model = GlowModel(GlowConfig(channels=channels, n_steps=n_steps, hidden=hidden, depth=depth,
                                 kernel=kernel, seed=seed)).to(dtype)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for name, p in model.named_parameters():
            # off-diagonal LU noise shrinks with width so W stays well conditioned
            k = scale / p.shape[0] if name.endswith(("lower", "upper")) else scale
            p.add_(k * torch.randn(p.shape, generator=gen, dtype=torch.float64).to(dtype))
        for step in model.steps:
            step.actnorm.initialized.fill_(1)
    return model


def numeric_jacobian(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Column-by-column central differences of ``fn: R^n -> R^m`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.ravel()
    cols = []
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        plus = np.asarray(fn((flat + e).reshape(x.shape)), dtype=np.float64).ravel()
        minus = np.asarray(fn((flat - e).reshape(x.shape)), dtype=np.float64).ravel()
        cols.append((plus - minus) / (2 * h))
    return np.stack(cols, axis=1)


def log_abs_det(jac: np.ndarray) -> float:
    sign, val = np.linalg.slogdet(jac)
    assert sign != 0
    return float(val)


def central_difference(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of a scalar ``fn`` by central differences."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def max_rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))
