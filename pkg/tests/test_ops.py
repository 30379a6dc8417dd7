import numpy as np
import pytest
import torch

from cafnet.errors import ConfigError, NumericError
from cafnet.ops import ResidualBlock, avg_pool_stride, grad_check, sparse_conv, upsample2x

import oracles


def t64(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


def test_sparse_conv_full_mask_is_local_mean(rng):
    x = rng.normal(size=(9, 11))
    k = np.ones((3, 3))
    y, m = sparse_conv(t64(x)[None, None], torch.ones(1, 1, 9, 11, dtype=torch.float64),
                       t64(k)[None, None], t64([0.25]), eps=1e-12)
    want = oracles.normalized_conv_loop(x, np.ones_like(x), k, 0.25, 1e-12)
    np.testing.assert_allclose(y[0, 0].numpy(), want, atol=1e-10)
    # interior pixel: plain 3x3 mean plus bias
    assert abs(y[0, 0, 4, 5].item() - (x[3:6, 4:7].mean() + 0.25)) < 1e-10
    assert m.all()


def test_sparse_conv_general_matches_loop(rng):
    x = rng.normal(size=(7, 10))
    mask = (rng.random((7, 10)) < 0.3).astype(float)
    k = rng.normal(size=(3, 3))
    y, _ = sparse_conv(t64(x)[None, None], t64(mask)[None, None], t64(k)[None, None], t64([-0.5]))
    np.testing.assert_allclose(y[0, 0].numpy(), oracles.normalized_conv_loop(x, mask, k, -0.5, 1e-8),
                               rtol=1e-10, atol=1e-10)


def test_sparse_conv_empty_mask_gives_bias():
    x = torch.randn(1, 2, 6, 6, dtype=torch.float64)
    w = torch.randn(3, 2, 3, 3, dtype=torch.float64)
    b = t64([1.0, -2.0, 0.5])
    y, m = sparse_conv(x, torch.zeros(1, 1, 6, 6, dtype=torch.float64), w, b)
    assert torch.equal(y, b.view(1, 3, 1, 1).expand_as(y))
    assert not m.any()


def test_sparse_conv_mask_dilates():
    mask = torch.zeros(1, 1, 5, 5)
    mask[0, 0, 2, 2] = 1
    _, m = sparse_conv(torch.zeros(1, 1, 5, 5), mask, torch.ones(1, 1, 3, 3))
    assert m[0, 0, 1:4, 1:4].all() and m.sum() == 9


def test_sparse_conv_rejects_bad_eps():
    with pytest.raises(ConfigError):
        sparse_conv(torch.zeros(1, 1, 3, 3), torch.ones(1, 1, 3, 3), torch.ones(1, 1, 3, 3), eps=0.0)


def test_sparse_conv_invalid_pixels_ignored(rng):
    x = t64(rng.normal(size=(1, 4, 8, 8)))
    m = t64((rng.random((1, 1, 8, 8)) < 0.4).astype(float))
    w = t64(rng.normal(size=(5, 4, 3, 3)))
    y0, _ = sparse_conv(x, m, w)
    x2 = x + t64(rng.normal(scale=100, size=x.shape)) * (1 - m)
    y1, _ = sparse_conv(x2, m, w)
    assert torch.equal(y0, y1)


def test_avg_pool_constant_and_block():
    pooled = avg_pool_stride(torch.full((1, 1, 8, 8), 0.3, dtype=torch.float64), 4)
    assert torch.all((pooled - 0.3).abs() < 1e-15)
    assert avg_pool_stride(t64([[[[1.0, 0.0], [0.0, 1.0]]]]), 2).item() == 0.5


def test_avg_pool_matches_loop_and_preserves_mean(rng):
    g = rng.random((8, 16))
    out = avg_pool_stride(t64(g)[None, None], 4)[0, 0].numpy()
    assert np.abs(out - oracles.avg_pool_loop(g, 4)).max() < 1e-12
    assert abs(out.mean() - g.mean()) < 1e-12


def test_avg_pool_nondivisible():
    with pytest.raises(ConfigError):
        avg_pool_stride(torch.zeros(1, 1, 6, 8), 4)


def test_upsample_and_residual_shapes():
    x = torch.randn(2, 4, 3, 5)
    assert upsample2x(x).shape == (2, 4, 6, 10)
    assert ResidualBlock(4)(x).shape == x.shape


def test_grad_check_quadratic():
    theta = {"theta": torch.randn(7, dtype=torch.float64)}
    err = grad_check(lambda p: (p["theta"] ** 2).sum(), theta, eps=1e-6)
    assert err < 1e-8


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 3 * x

    err = grad_check(lambda p: Wrong.apply(p["x"]), {"x": torch.randn(4, dtype=torch.float64) + 2}, eps=1e-6)
    assert err > 0.1


def test_grad_check_restores_params():
    p = {"a": torch.randn(3, 3, dtype=torch.float64)}
    before = p["a"].clone()
    grad_check(lambda q: (q["a"].sin()).sum(), p, eps=1e-5)
    assert torch.equal(p["a"].detach(), before)


def test_grad_check_validation():
    p = {"a": torch.randn(3, dtype=torch.float64)}
    with pytest.raises(ConfigError):
        grad_check(lambda q: q["a"].sum(), p, eps=1e-2)
    with pytest.raises(NumericError):
        grad_check(lambda q: q["a"].sum() / 0.0, p, eps=1e-6)


def test_ops_deterministic(rng):
    x = torch.as_tensor(rng.normal(size=(1, 3, 16, 16)))
    m = torch.as_tensor((rng.random((1, 1, 16, 16)) < 0.2).astype(float))
    w = torch.as_tensor(rng.normal(size=(4, 3, 3, 3)))
    a, _ = sparse_conv(x, m, w)
    b, _ = sparse_conv(x, m, w)
    assert a.numpy().tobytes() == b.numpy().tobytes()
