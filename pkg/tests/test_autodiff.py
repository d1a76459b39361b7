import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssop import autodiff as ad
from ssop.gradcheck import check_gradients

RNG = np.random.default_rng(0)


def leaf(*shape, rng=RNG, cplx=False):
    x = rng.standard_normal(shape)
    if cplx:
        x = x + 1j * rng.standard_normal(shape)
    return ad.Tensor(x, requires_grad=True)


def assert_grads(fn, leaves, tol=1e-4):
    w = None

    def loss():
        nonlocal w
        out = fn()
        if w is None:
            w = np.random.default_rng(7).standard_normal(out.shape)
        if out.is_complex:
            return ad.sum_(ad.real(out) * w + ad.imag(out) * (0.3 * w))
        return ad.sum_(out * w)

    errs = check_gradients(loss, leaves)
    assert max(errs.values()) < tol, errs


def test_softmax_uniform():
    out = ad.softmax(ad.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)


def test_layernorm_constant_is_zero():
    out = ad.layer_norm(ad.Tensor(np.full((2, 5), 0.7)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_matmul_identity():
    x = RNG.standard_normal((3, 4))
    np.testing.assert_array_equal(ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(x)).data, x)


def test_square_derivative():
    x = ad.Tensor(3.0, requires_grad=True)
    ad.backward(x * x)
    assert x.grad == 6.0


def test_non_scalar_root_rejected():
    x = leaf(3)
    with pytest.raises(ValueError, match="scalar"):
        ad.backward(x * 2.0)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((4, 5))))


def test_softmax_grad_sums_to_zero_per_row():
    z = leaf(4, 6)
    loss = ad.sum_(ad.softmax(z) * RNG.standard_normal((4, 6)))
    ad.backward(loss)
    np.testing.assert_allclose(z.grad.sum(axis=-1), 0.0, atol=1e-14)


def test_no_grad_skips_recording():
    x = leaf(3)
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad and y._parents == ()


def test_backward_deterministic():
    a, b = leaf(5, 4), leaf(4, 3)

    def run():
        return ad.backward(ad.sum_(ad.tanh(a @ b) ** 2))[a].copy()

    np.testing.assert_array_equal(run(), run())


def test_deep_chain_no_recursion_limit():
    x = ad.Tensor(1.0, requires_grad=True)
    y = x
    for _ in range(20000):
        y = y * 1.0
    ad.backward(y)
    assert x.grad == 1.0


def test_mlp_mse_matches_finite_differences():
    x = RNG.standard_normal((6, 3))
    t = RNG.standard_normal((6, 2))
    w1, b1, w2, b2 = leaf(3, 5), leaf(5), leaf(5, 2), leaf(2)

    def loss():
        h = ad.tanh(ad.Tensor(x) @ w1 + b1)
        d = h @ w2 + b2 - t
        return ad.mean(d * d)

    errs = check_gradients(loss, [w1, b1, w2, b2])
    assert max(errs.values()) < 1e-4


UNARY = {
    "exp": ad.exp, "tanh": ad.tanh, "sigmoid": ad.sigmoid, "silu": ad.silu,
    "softplus": ad.softplus, "gelu": ad.gelu, "neg": ad.neg, "expm1": ad.expm1,
    "square": ad.square, "softmax": ad.softmax, "layer_norm": ad.layer_norm,
    "relu": ad.relu,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    x = leaf(3, 5)
    if name == "relu":
        x.data[np.abs(x.data) < 1e-3] = 0.5
    assert_grads(lambda: UNARY[name](x), [x])


def test_log_sqrt_pow_gradients():
    x = ad.Tensor(RNG.uniform(0.5, 2.0, (4, 3)), requires_grad=True)
    assert_grads(lambda: ad.log(x) + ad.sqrt(x) + x ** 1.5, [x])


@pytest.mark.parametrize("cplx", [False, True])
def test_binary_broadcast_gradients(cplx):
    a, b = leaf(3, 1, 4, cplx=cplx), leaf(2, 1, cplx=cplx)
    c = ad.Tensor(RNG.uniform(1, 2, (2, 4)), requires_grad=True)
    assert_grads(lambda: (a + b) * b - a / (c + 0.5 * b) + ad.exp(a * 0.1), [a, b, c])


@pytest.mark.parametrize("cplx", [False, True])
def test_matmul_batched_gradients(cplx):
    a, b = leaf(2, 3, 4, cplx=cplx), leaf(4, 5, cplx=cplx)
    assert_grads(lambda: a @ b, [a, b])


def test_einsum_gradients_with_summed_index():
    a = leaf(2, 3, 4, cplx=True)
    w = leaf(3, 4, 5, cplx=True)
    v, u = leaf(6, 2), leaf(6, 3)
    assert_grads(lambda: ad.einsum("bmi,mio->bmo", a, w), [a, w])
    # index 'k' only in first operand, summed out
    assert_grads(lambda: ad.einsum("ik,ij->j", v, u), [v, u])


def test_shape_ops_gradients():
    x = leaf(2, 3, 4)
    y = leaf(2, 3, 2)

    def fn():
        z = ad.concat([x, y], axis=-1)
        z = ad.transpose(z, (2, 0, 1)).reshape(6, 6)
        s = ad.stack([z[1:4, ::2], z[[0, 0, 5], :3]], axis=0)
        return ad.sum_(s, axis=1) + ad.mean(z, axis=0, keepdims=True)[:, :3]

    assert_grads(fn, [x, y])


def test_causal_conv_gradients_and_causality():
    x, w, b = leaf(2, 7, 3), leaf(3, 4), leaf(3)
    assert_grads(lambda: ad.causal_conv1d(x, w, b), [x, w, b])
    y0 = ad.causal_conv1d(x, w, b).data
    x2 = x.data.copy()
    x2[:, 4] += 1.0
    y1 = ad.causal_conv1d(ad.Tensor(x2), w, b).data
    np.testing.assert_array_equal(y0[:, :4], y1[:, :4])
    assert not np.array_equal(y0[:, 4], y1[:, 4])


def test_causal_conv_last_tap_is_current_step():
    x = np.zeros((5, 1))
    x[2, 0] = 1.0
    w = np.array([[1.0, 2.0, 3.0]])
    y = ad.causal_conv1d(ad.Tensor(x), ad.Tensor(w)).data[:, 0]
    np.testing.assert_array_equal(y, [0, 0, 3, 2, 1])


def test_attention_fused_gradients():
    q, k, v = leaf(2, 5, 3), leaf(2, 5, 3), leaf(2, 5, 3)
    assert_grads(lambda: ad.scaled_dot_attention(q, k, v), [q, k, v])


def test_complex_helpers_gradients():
    re, im = leaf(4), leaf(4)
    assert_grads(lambda: ad.conj(ad.complex_(re, im)) * ad.complex_(im, re), [re, im])


# -- FFT ---------------------------------------------------------------------

def dft(x, n):
    # direct O(n^2) transform, independent of numpy.fft
    x = np.concatenate([x, np.zeros(max(0, n - len(x)))])[:n]
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    return (np.exp(-2j * np.pi * k * t / n) * x).sum(axis=1)


def test_rfft_impulse():
    x = np.zeros(8)
    x[0] = 1.0
    np.testing.assert_allclose(ad.rfft(ad.Tensor(x)).data, np.ones(5), atol=1e-15)


def test_rfft_constant():
    out = ad.rfft(ad.Tensor(np.full(10, 2.5))).data
    assert out[0] == pytest.approx(25.0)
    np.testing.assert_allclose(out[1:], 0.0, atol=1e-13)


def test_parseval_against_direct_dft():
    x = RNG.standard_normal(64)
    X = ad.rfft(ad.Tensor(x)).data
    np.testing.assert_allclose(X, dft(x, 64), atol=1e-10)
    energy = (abs(X[0]) ** 2 + abs(X[-1]) ** 2 + 2 * (abs(X[1:-1]) ** 2).sum()) / 64
    assert energy == pytest.approx((x ** 2).sum(), rel=1e-10)


def test_fft_round_trip_all_lengths():
    for n in range(1, 129):
        x = RNG.standard_normal(n)
        X = ad.rfft(ad.Tensor(x), n)
        assert X.shape == (n // 2 + 1,)
        np.testing.assert_allclose(ad.irfft(X, n).data, x, atol=1e-12)


def test_fft_zero_length_rejected():
    with pytest.raises(ValueError):
        ad.rfft(ad.Tensor(np.ones(3)), 0)
    with pytest.raises(ValueError):
        ad.irfft(ad.Tensor(np.ones(3, dtype=complex)), 0)


@pytest.mark.parametrize("n,m", [(8, 8), (7, 7), (6, 11), (9, 4)])
def test_rfft_irfft_gradients(n, m):
    x = leaf(2, n)
    assert_grads(lambda: ad.rfft(x, m), [x])
    X = leaf(2, n // 2 + 1, cplx=True)
    assert_grads(lambda: ad.irfft(X, m), [X])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_rfft_matches_direct_dft(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    np.testing.assert_allclose(ad.rfft(ad.Tensor(x)).data, dft(x, n), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(r, c, seed):
    z = np.random.default_rng(seed).standard_normal((r, c)) * 30
    np.testing.assert_allclose(ad.softmax(ad.Tensor(z)).data.sum(-1), 1.0, atol=1e-12)
