import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import conv2d_loops, log_softmax_np, mha_loops
from uktr import nn as unn

F64 = dict(dtype=torch.float64)


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
@settings(max_examples=200)
def test_softmax_matches_numpy(xs):
    x = torch.tensor(xs, dtype=torch.float64)
    lp = unn.log_softmax(x)
    np.testing.assert_allclose(lp.numpy(), log_softmax_np(xs), rtol=1e-12, atol=1e-12)
    s = unn.softmax(x)
    assert abs(float(s.sum()) - 1.0) < 1e-12
    assert (s >= 0).all()


def test_softmax_shift_invariance_and_extremes():
    x = torch.tensor([1000.0, 1000.0, -1000.0])
    np.testing.assert_allclose(unn.softmax(x).numpy(), [0.5, 0.5, 0.0])
    assert torch.isfinite(unn.log_softmax(x)[:2]).all()
    with pytest.raises(ValueError):
        unn.softmax(torch.zeros(3, 0))


def test_layer_norm_functional_matches_class():
    x = rand(4, 7, 16)
    ln = unn.LayerNorm(16).double()
    with torch.no_grad():
        ln.weight.normal_()
        ln.bias.normal_()
    ref = unn.layer_norm(x, ln.weight, ln.bias)
    torch.testing.assert_close(ln(x), ref, rtol=1e-10, atol=1e-10)
    y = unn.layer_norm(x)
    torch.testing.assert_close(y.mean(-1), torch.zeros(4, 7, **F64), atol=1e-12, rtol=0)


def test_group_norm_statistics():
    x = rand(2, 8, 5, 6) * 3 + 2
    gn = unn.GroupNorm(8, 4).double()
    y = gn(x).view(2, 4, -1)
    torch.testing.assert_close(y.mean(-1), torch.zeros(2, 4, **F64), atol=1e-10, rtol=0)
    torch.testing.assert_close(y.var(-1, unbiased=False), torch.ones(2, 4, **F64), atol=1e-4, rtol=0)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_loops(stride, padding):
    x = rand(1, 3, 6, 7, seed=1)
    w = rand(4, 3, 3, 3, seed=2)
    b = rand(4, seed=3)
    out = unn.conv2d(x, w, b, stride, padding)[0].numpy()
    ref = conv2d_loops(x[0].numpy(), w.numpy(), b.numpy(), stride, padding)
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-10)
    assert out.shape[1] == unn.conv_out_size(6, 3, stride, padding)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError):
        unn.conv2d(rand(1, 2, 4, 4), rand(3, 3, 3, 3))
    with pytest.raises(ValueError):
        unn.conv2d(rand(2, 4, 4), rand(3, 2, 3, 3))


def test_attention_matches_loops_with_mask():
    d, heads = 8, 2
    mha = unn.MultiHeadAttention(d, heads).double()
    q, kv = rand(1, 5, d, seed=4), rand(1, 6, d, seed=5)
    mask = torch.rand(5, 6, generator=torch.Generator().manual_seed(6)) > 0.4
    mask[:, 0] = True
    W = {k: v.detach().numpy() for k, v in mha.weights().items()}
    ref = mha_loops(q[0].numpy(), kv[0].numpy(), kv[0].numpy(), heads, W, mask.numpy())
    out_fast = mha(q, kv, kv, mask)
    out_explicit, w = mha(q, kv, kv, mask, return_weights=True)
    np.testing.assert_allclose(out_explicit[0].detach().numpy(), ref, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(out_fast[0].detach().numpy(), ref, rtol=1e-8, atol=1e-10)
    assert (w[0][:, ~mask] == 0).all()
    torch.testing.assert_close(w.sum(-1), torch.ones(1, heads, 5, **F64))


def test_causal_mask():
    m = unn.causal_mask(4)
    assert m.dtype == torch.bool
    assert m[2, 3].item() is False and m[3, 2].item() is True and m.diagonal().all()


def test_attention_bad_heads():
    with pytest.raises(ValueError):
        unn.MultiHeadAttention(10, 3)


def test_dropout_reproducible_and_scaled():
    x = torch.ones(10000, **F64)
    a = unn.dropout(x, 0.3, True, torch.Generator().manual_seed(1))
    b = unn.dropout(x, 0.3, True, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    assert set(a.unique().tolist()) <= {0.0, 1 / 0.7}
    assert abs(float(a.mean()) - 1.0) < 0.05
    assert torch.equal(unn.dropout(x, 0.3, False), x)


def test_sinusoidal_positions():
    pe = unn.sinusoidal_positions(10, 6)
    assert pe.shape == (10, 6)
    assert pe[0, 0] == 0 and pe[0, 1] == 1
    assert math.isclose(float(pe[3, 2]), math.sin(3 / 10000 ** (2 / 6)), rel_tol=1e-6)


def test_linear_init_and_count():
    lin = unn.Linear(100, 10)
    bound = 1 / math.sqrt(100)
    assert lin.weight.abs().max() <= bound
    assert unn.count_params(lin) == 1010


def test_backward_errors_and_unused():
    a = torch.ones(2, requires_grad=True)
    b = torch.ones(3, requires_grad=True)
    g = unn.backward((a * 2).sum(), [a, b])
    assert torch.equal(g[1], torch.zeros(3))
    with pytest.raises(ValueError):
        unn.backward(a * 2, [a])
    with pytest.raises(RuntimeError):
        unn.backward(torch.tensor(1.0), [a])


def test_gradcheck_catches_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * x  # should be 2x

    x = rand(5).requires_grad_()
    assert unn.gradcheck(lambda: Wrong.apply(x), [x])[0] > 0.1
    assert unn.gradcheck(lambda: (x ** 2).sum(), [x])[0] < 1e-8


def test_gradcheck_requires_float64():
    x = torch.ones(2, dtype=torch.float32, requires_grad=True)
    with pytest.raises(TypeError):
        unn.gradcheck(lambda: x.sum(), [x])
