"""Engine-level gradient checks: every op against central finite differences."""

import numpy as np
import pytest

from scmvae import autodiff as ad


def fd_directional(f, xs, i, v, h=1e-6):
    """Central finite difference of f(*xs) along direction v in argument i."""
    xp = [x.copy() for x in xs]
    xm = [x.copy() for x in xs]
    xp[i] = xp[i] + h * v
    xm[i] = xm[i] - h * v
    return (f(*xp) - f(*xm)) / (2.0 * h)


def check_grads(f, xs, rtol=1e-6, atol=1e-9, seed=0):
    """f maps ndarrays -> scalar; compare autodiff grads with directional FD."""
    rng = np.random.default_rng(seed)
    ts = [ad.Tensor(x, requires_grad=True) for x in xs]
    out = f(*ts)
    out.backward()
    for i, (x, t) in enumerate(zip(xs, ts)):
        v = rng.standard_normal(x.shape)
        v /= np.linalg.norm(v) + 1e-12
        got = float(np.sum(t.grad * v))
        want = fd_directional(lambda *a: float(ad.value(f(*[ad.astensor(q) for q in a]))), xs, i, v)
        assert got == pytest.approx(want, rel=rtol, abs=atol), f"arg {i}: {got} vs {want}"


RNG = np.random.default_rng(42)


def test_elementwise_chain():
    x = RNG.standard_normal((4, 5))
    y = RNG.standard_normal((4, 5))
    check_grads(lambda a, b: (ad.tanh(a) * ad.sigmoid(b) + ad.softplus(a - b)).sum(), [x, y])


def test_broadcasting_add_mul():
    x = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4,))
    check_grads(lambda a, c: ((a + c) * c).sum(), [x, b])


def test_exp_log_sqrt_pow():
    x = RNG.random((6,)) + 0.5
    check_grads(lambda a: (ad.log(a) + ad.sqrt(a) + a**3.0 + ad.exp(-a)).sum(), [x])


def test_silu():
    x = RNG.standard_normal((7,))
    check_grads(lambda a: ad.silu(a).sum(), [x])


def test_matmul_2d():
    a = RNG.standard_normal((3, 4))
    b = RNG.standard_normal((4, 2))
    check_grads(lambda x, y: ad.square(x @ y).sum(), [a, b])


def test_sum_mean_axes():
    x = RNG.standard_normal((3, 4, 2))
    check_grads(lambda a: ad.tsum(a, axis=1).mean(), [x])
    check_grads(lambda a: ad.tmean(a, axis=(0, 2)).sum(), [x])


def test_max_routes_to_argmax():
    x = RNG.standard_normal((5, 6))
    check_grads(lambda a: ad.tmax(a, axis=1).sum(), [x])
    t = ad.Tensor(x, requires_grad=True)
    ad.tmax(t).backward()
    assert t.grad.sum() == 1.0
    assert t.grad.reshape(-1)[np.argmax(x)] == 1.0


def test_logsumexp_matches_numpy_and_grads():
    x = RNG.standard_normal((4, 9))
    got = ad.logsumexp(x, axis=1)
    want = np.log(np.exp(x).sum(axis=1))
    np.testing.assert_allclose(got, want, rtol=1e-12)
    check_grads(lambda a: ad.logsumexp(a, axis=1).sum(), [x])
    check_grads(lambda a: ad.logsumexp(a) * 1.0, [x])


def test_reshape_transpose_take_concat_stack():
    x = RNG.standard_normal((4, 6))
    check_grads(lambda a: ad.reshape(a, (2, 12)).sum(), [x])
    check_grads(lambda a: ad.transpose(a).sum(), [x])
    check_grads(lambda a: (a[1:3, ::2] ** 2.0).sum(), [x])
    y = RNG.standard_normal((4, 6))
    check_grads(lambda a, b: ad.concat([a, b], axis=1).mean(), [x, y])
    check_grads(lambda a, b: (ad.stack([a, b], axis=0) ** 2.0).sum(), [x, y])


def test_take_diagonal_fancy_index():
    x = RNG.standard_normal((5, 5))
    idx = (np.arange(5), np.arange(5))
    check_grads(lambda a: a[idx].sum(), [x])


def test_solve_grads_and_value():
    a = np.eye(4) + 0.1 * RNG.standard_normal((4, 4))
    b = RNG.standard_normal((4, 3))
    np.testing.assert_allclose(ad.solve(a, b), np.linalg.solve(a, b))
    check_grads(lambda m, c: (ad.solve(m, c) ** 2.0).sum(), [a, b], rtol=1e-5)


def test_conv2d_matches_naive_and_grads():
    x = RNG.standard_normal((2, 8, 8, 3))  # NHWC
    w = RNG.standard_normal((4, 4, 3, 4)) * 0.3  # HWIO
    out = ad.conv2d(x, w, stride=2, pad=1)
    # naive direct convolution oracle
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    want = np.zeros((2, 4, 4, 4))
    for b in range(2):
        for co in range(4):
            for i in range(4):
                for j in range(4):
                    patch = xp[b, 2 * i : 2 * i + 4, 2 * j : 2 * j + 4, :]
                    want[b, i, j, co] = np.sum(patch * w[:, :, :, co])
    np.testing.assert_allclose(out, want, rtol=1e-10, atol=1e-12)
    check_grads(lambda a, k: (ad.conv2d(a, k, stride=2, pad=1) ** 2.0).sum(), [x, w], rtol=1e-5)


def test_conv_transpose2d_is_adjoint_and_grads():
    x = RNG.standard_normal((2, 4, 4, 4))  # NHWC, Cin=4
    w = RNG.standard_normal((4, 4, 3, 4)) * 0.3  # (k,k,Cout=3,Cin=4)
    y = ad.conv_transpose2d(x, w, stride=2, pad=1, out_hw=(8, 8))
    assert y.shape == (2, 8, 8, 3)
    # <conv(u; w), x> == <u, convT(x; w)> for random u (same kernel, dual layout)
    u = RNG.standard_normal((2, 8, 8, 3))
    lhs = np.sum(ad.conv2d(u, w, stride=2, pad=1) * x)
    rhs = np.sum(u * y)
    assert lhs == pytest.approx(rhs, rel=1e-10)
    check_grads(lambda a, k: (ad.conv_transpose2d(a, k, stride=2, pad=1, out_hw=(8, 8)) ** 2.0).sum(), [x, w], rtol=1e-5)


def test_detach_blocks_gradient():
    x = ad.Tensor(np.array([2.0, 3.0]), requires_grad=True)
    out = (x * ad.detach(x)).sum()
    out.backward()
    np.testing.assert_allclose(x.grad, x.data)  # only the live branch contributes


def test_plain_ndarray_passthrough():
    x = np.array([1.0, 2.0])
    assert isinstance(ad.tanh(x), np.ndarray)
    assert isinstance(ad.conv2d(RNG.standard_normal((1, 4, 4, 1)), RNG.standard_normal((4, 4, 1, 1)) * 0.1), np.ndarray)
    assert isinstance(x + np.array([1.0, 1.0]), np.ndarray)


def test_float32_stays_float32():
    x = ad.Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    out = (ad.silu(x) * 0.5 + ad.softplus(x)).sum()
    assert out.dtype == np.float32
    out.backward()
    assert x.grad.dtype == np.float32
