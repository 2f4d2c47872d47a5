import math

import numpy as np
import pytest
import torch

from flowsep.errors import ShapeError
from flowsep.flow.layers import ActNorm, AffineCoupling, FlowStep, InvConv1x1, squeeze, unsqueeze
from oracles import log_abs_det, numeric_jacobian

torch.set_default_dtype(torch.float32)


def _as_fn(layer, shape):
    def fn(x):
        with torch.no_grad():
            y, _ = layer(torch.tensor(x).reshape(shape))
        return y.numpy()
    return fn


def test_squeeze_layout():
    x = torch.tensor([[[1.0, 2.0, 3.0, 4.0]]])
    np.testing.assert_array_equal(squeeze(x).numpy(), [[[1.0, 3.0], [2.0, 4.0]]])


def test_squeeze_shapes_and_inverse():
    x = torch.randn(2, 513, 430)
    y = squeeze(x)
    assert y.shape == (2, 1026, 215)
    assert torch.equal(unsqueeze(y), x)


def test_squeeze_odd_length():
    with pytest.raises(ShapeError):
        squeeze(torch.zeros(1, 3, 5))


def test_actnorm_identity():
    layer = ActNorm(3).eval()
    x = torch.randn(2, 3, 5)
    y, ld = layer(x)
    assert torch.equal(y, x)
    assert torch.all(ld == 0)


def test_actnorm_logdet_closed_form():
    layer = ActNorm(2).eval()
    with torch.no_grad():
        layer.log_scale.fill_(math.log(2.0))
    with torch.no_grad():
        y, ld = layer(torch.ones(1, 2, 3, dtype=torch.float32))
    assert float(ld[0]) == pytest.approx(3 * 2 * math.log(2.0), abs=1e-5)
    assert float(ld[0]) == pytest.approx(4.158883, abs=1e-5)
    assert torch.allclose(y, torch.full_like(y, 2.0))


def test_actnorm_data_init():
    layer = ActNorm(4)
    x = torch.randn(8, 4, 50, dtype=torch.float64) * torch.tensor([1.0, 3.0, 0.1, 10.0])[None, :, None].double() + 5
    layer = layer.double().train()
    layer.data_init(x)
    with torch.no_grad():
        y, _ = layer(x)
    np.testing.assert_allclose(y.mean(dim=(0, 2)).numpy(), 0, atol=1e-4)
    np.testing.assert_allclose(y.var(dim=(0, 2), unbiased=False).numpy(), 1, atol=1e-4)


def test_actnorm_uninitialised_training_use():
    layer = ActNorm(2).train()
    with pytest.raises(RuntimeError):
        layer(torch.zeros(1, 2, 2))


def test_invconv_identity_weight():
    layer = InvConv1x1.from_weight(np.eye(3))
    x = torch.randn(2, 3, 4)
    y, ld = layer(x)
    assert torch.allclose(y, x)
    assert torch.all(ld.abs() < 1e-7)


def test_invconv_swap():
    layer = InvConv1x1.from_weight([[0.0, 1.0], [1.0, 0.0]])
    x = torch.randn(1, 2, 6)
    y, ld = layer(x)
    assert torch.allclose(y, x.flip(1))
    assert float(ld[0]) == pytest.approx(0.0, abs=1e-7)


def test_invconv_diagonal_logdet():
    layer = InvConv1x1.from_weight(np.diag([2.0, 3.0]))
    _, ld = layer(torch.zeros(1, 2, 5))
    assert float(ld[0]) == pytest.approx(5 * math.log(6), abs=1e-5)
    assert float(ld[0]) == pytest.approx(8.958797, abs=1e-5)


def test_invconv_plu_determinant_identity():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((6, 6))
    layer = InvConv1x1.from_weight(w).double()
    W = layer.weight().detach().numpy()
    np.testing.assert_allclose(W, w, atol=1e-6)
    assert float(layer.log_s.sum()) == pytest.approx(np.linalg.slogdet(W)[1], abs=1e-10)


def test_invconv_orthogonal_init():
    layer = InvConv1x1(16, torch.Generator().manual_seed(0)).double()
    W = layer.weight().detach().numpy()
    np.testing.assert_allclose(W @ W.T, np.eye(16), atol=1e-6)
    assert abs(float(layer.log_s.sum())) < 1e-5


def test_invconv_round_trip():
    layer = InvConv1x1.from_weight(np.random.default_rng(1).standard_normal((5, 5))).double()
    x = torch.randn(3, 5, 7, dtype=torch.float64)
    y, ld = layer(x)
    back, ld_inv = layer.inverse(y)
    assert torch.allclose(back, x, atol=1e-10)
    assert float((ld + ld_inv).abs().max()) < 1e-10


def test_coupling_identity_at_init():
    layer = AffineCoupling(6, hidden=8, depth=2)
    x = torch.randn(2, 6, 5)
    y, ld = layer(x)
    assert torch.equal(y, x)
    assert torch.all(ld == 0)


def test_coupling_forced_log_scale():
    layer = AffineCoupling(4, hidden=8, depth=2)
    with torch.no_grad():
        layer.net.end.bias[:2] = math.log(2.0)
    x = torch.randn(1, 4, 2)
    y, ld = layer(x)
    assert float(ld[0]) == pytest.approx(4 * math.log(2.0), abs=1e-5)
    assert float(ld[0]) == pytest.approx(2.772589, abs=1e-5)
    assert torch.allclose(y[:, 2:], 2 * x[:, 2:])
    assert torch.equal(y[:, :2], x[:, :2])


def _perturbed_coupling(channels, seed=0):
    layer = AffineCoupling(channels, hidden=8, depth=3).double()
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in layer.parameters():
            p.add_(0.2 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    return layer


def test_coupling_round_trip():
    layer = _perturbed_coupling(6)
    x = torch.randn(2, 6, 9, dtype=torch.float64)
    y, _ = layer(x)
    back, _ = layer.inverse(y)
    assert float((back - x).abs().max()) < 1e-5


def test_coupling_odd_channels():
    with pytest.raises(ShapeError):
        AffineCoupling(5)


# Analytic log-dets against the log|det| of a numerically assembled Jacobian.

def _check_jacobian(layer, shape):
    x = np.random.default_rng(7).standard_normal(shape)
    with torch.no_grad():
        _, ld = layer(torch.tensor(x))
    jac = numeric_jacobian(_as_fn(layer, shape), x)
    num = log_abs_det(jac)
    analytic = float(ld[0])
    assert abs(analytic - num) <= 1e-3 * max(abs(num), 1.0)
    return analytic, num


def test_jacobian_actnorm():
    layer = ActNorm(4).double().eval()
    with torch.no_grad():
        layer.log_scale.copy_(torch.tensor([0.3, -0.7, 1.1, 0.05], dtype=torch.float64))
        layer.bias.copy_(torch.tensor([0.1, 0.2, -0.3, 0.4], dtype=torch.float64))
    _check_jacobian(layer, (1, 4, 8))


def test_jacobian_invconv():
    layer = InvConv1x1.from_weight(np.random.default_rng(2).standard_normal((4, 4))).double()
    _check_jacobian(layer, (1, 4, 8))


def test_jacobian_coupling():
    _check_jacobian(_perturbed_coupling(4, seed=3), (1, 4, 8))


def test_jacobian_flow_step():
    step = FlowStep(4, 8, 2, 3, torch.Generator().manual_seed(0)).double()
    gen = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for p in step.parameters():
            p.add_(0.2 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
        step.actnorm.initialized.fill_(1)
    _check_jacobian(step, (1, 4, 16))
