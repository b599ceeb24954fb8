import pytest
import torch
from hypothesis import given, settings, strategies as st

from uktr.mafs import MAFS, Adapter, MafsConfig, aggregate, gpool
from uktr.nn import gradcheck

F64 = torch.float64


def test_shapes_and_simplex():
    m = MAFS(MafsConfig(n=5, p=4, d=8)).double()
    g = torch.randn(3, 8, 2, 7, dtype=F64)
    u, u1d, r = m(g, g.mean(-2))
    assert u.shape == g.shape and u1d.shape == (3, 8, 7) and r.shape == (3, 5)
    assert (r >= 0).all()
    torch.testing.assert_close(r.sum(-1), torch.ones(3, dtype=F64))


def test_full_mafs_sizes():
    m = MAFS(MafsConfig())
    assert m.router.fc1.weight.shape == (128, 512)
    assert m.router.fc2.weight.shape == (5, 128)
    assert m.adapters[0].down.weight.shape == (128, 512)


def test_adapter_is_residual():
    a = Adapter(6, 3).double()
    with torch.no_grad():
        a.up.weight.zero_()
        a.up.bias.zero_()
    x = torch.randn(2, 6, 3, 4, dtype=F64)
    torch.testing.assert_close(a(x), x)


def test_gpool():
    g = torch.randn(2, 3, 4, 5)
    torch.testing.assert_close(gpool(g), g.mean((2, 3)))


@given(st.integers(1, 6), st.integers(0, 10 ** 6))
@settings(max_examples=60, deadline=None)
def test_aggregate_properties(n, seed):
    gen = torch.Generator().manual_seed(seed)
    h = torch.randn(2, n, 4, 3, 5, generator=gen, dtype=F64)
    h1d = h.mean(-2)
    r = torch.softmax(torch.randn(2, n, generator=gen, dtype=F64), -1)
    u, u1d = aggregate(h, h1d, r)
    # every entry lies in the convex hull (between the adapter-wise min and max)
    assert (u <= h.amax(1) + 1e-12).all() and (u >= h.amin(1) - 1e-12).all()
    torch.testing.assert_close(u1d, u.mean(-2))
    for k in range(n):
        onehot = torch.zeros(2, n, dtype=F64)
        onehot[:, k] = 1
        uk, _ = aggregate(h, h1d, onehot)
        assert torch.equal(uk, h[:, k])


def test_aggregate_mismatch():
    with pytest.raises(ValueError):
        aggregate(torch.zeros(1, 3, 2, 2, 2), torch.zeros(1, 3, 2, 2), torch.ones(1, 2) / 2)


def test_config_validation():
    with pytest.raises(ValueError):
        MafsConfig(n=0)
    with pytest.raises(ValueError):
        MafsConfig(p=1024, d=512)


def test_gradients():
    torch.manual_seed(1)
    m = MAFS(MafsConfig(n=3, p=2, d=4)).double()
    g = torch.randn(1, 4, 2, 3, dtype=F64, requires_grad=True)
    ps = [m.router.fc1.weight, m.adapters[1].down.weight]
    errs = gradcheck(lambda: (m(g, g.mean(-2))[0] ** 2).sum(), [g, *ps])
    assert max(errs) < 1e-5
