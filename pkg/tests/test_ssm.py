import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssop import autodiff as ad
from ssop.gradcheck import check_gradients
from ssop.ssm import (DiscreteSSM, MambaBlock, MambaBlockConfig, MambaModel, SSMParams,
                      dphi, phi, selective_scan, selective_scan_reference, ssm_conv,
                      ssm_kernel, ssm_scan, zoh_discretize)

from oracles import direct_causal_conv, zoh_dense


def random_lti(rng, channels=2, n=4):
    A = -rng.uniform(0.05, 3.0, (channels, n))
    p = SSMParams.from_A(A, rng.standard_normal((channels, n)),
                         rng.standard_normal((channels, n)), rng.uniform(0.01, 0.5))
    return p, zoh_discretize(p)


def test_zoh_zero_limit():
    d = zoh_discretize(np.array([0.0]), np.array([2.0]), 0.5)
    assert d.A_bar[0] == 1.0 and d.B_bar[0] == 1.0


def test_zoh_half_decay():
    d = zoh_discretize(np.array([-1.0]), np.array([1.0]), math.log(2))
    assert d.A_bar[0] == pytest.approx(0.5, abs=1e-15)
    assert d.B_bar[0] == pytest.approx(0.5, abs=1e-15)


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        zoh_discretize(np.array([-1.0]), np.array([1.0]), 0.0)


def test_zoh_matches_matrix_exponential():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = rng.integers(1, 9)
        a = -rng.uniform(0.01, 5, n)
        b = rng.standard_normal(n)
        dt = rng.uniform(1e-3, 1)
        d = zoh_discretize(a, b, dt)
        Ad, Bd = zoh_dense(a, b, dt)
        np.testing.assert_allclose(d.A_bar, np.diag(Ad), atol=1e-10)
        np.testing.assert_allclose(d.B_bar, Bd, atol=1e-10)


def test_phi_and_derivative_continuous_across_cutoffs():
    z = np.array([-2e-4, -1.0001e-4, -0.9999e-4, -1e-8 * 1.01, -1e-8 * 0.99, 0.0, 3e-3])
    np.testing.assert_allclose(phi(z), np.expm1(z + 0j).real / np.where(z == 0, 1, z) +
                               (z == 0), rtol=1e-12)
    h = 1e-6
    zz = np.array([-0.3, -1e-3, -5e-5, -2.0])
    fd = (phi(zz + h) - phi(zz - h)) / (2 * h)
    np.testing.assert_allclose(dphi(zz), fd, rtol=1e-7)


def test_scan_single_step_and_zero_input():
    rng = np.random.default_rng(0)
    p, d = random_lti(rng)
    x = rng.standard_normal((1, 2))
    np.testing.assert_allclose(ssm_scan(x, d, p.C)[0], (p.C * d.B_bar).sum(-1) * x[0], rtol=1e-14)
    np.testing.assert_array_equal(ssm_scan(np.zeros((5, 2)), d, p.C), 0.0)
    assert ssm_scan(np.zeros((0, 2)), d, p.C).shape == (0, 2)


def test_kernel_closed_forms():
    d = DiscreteSSM(np.array([0.7]), np.array([2.0]))
    K = ssm_kernel(d, np.array([1.5]), 6)[:, 0]
    assert K[0] == 3.0
    np.testing.assert_allclose(K[1:] / K[:-1], 0.7, rtol=1e-14)
    K0 = ssm_kernel(DiscreteSSM(np.array([0.0]), np.array([2.0])), np.array([1.5]), 4)[:, 0]
    np.testing.assert_array_equal(K0, [3.0, 0, 0, 0])
    with pytest.raises(ValueError):
        ssm_kernel(d, np.array([1.0]), 0)


def test_conv_impulse_and_direct_oracle():
    rng = np.random.default_rng(1)
    K = rng.standard_normal(32)
    x = np.zeros(32)
    x[0] = 1.0
    np.testing.assert_allclose(ssm_conv(x, K), K, atol=1e-12)
    x = rng.standard_normal(32)
    np.testing.assert_allclose(ssm_conv(x, K), direct_causal_conv(x, K), atol=1e-10)
    with pytest.raises(ValueError):
        ssm_conv(x, K[:10])


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, 33, 64, 256]), st.integers(0, 2**31 - 1))
def test_scan_conv_duality(L, seed):
    rng = np.random.default_rng(seed)
    p, d = random_lti(rng)
    x = rng.uniform(-1, 1, (L, 2))
    y_scan = ssm_scan(x, d, p.C)
    y_conv = ssm_conv(x, ssm_kernel(d, p.C, L))
    assert np.max(np.abs(y_scan - y_conv)) <= 1e-9


def test_scan_stable_on_long_sequence():
    rng = np.random.default_rng(2)
    p, d = random_lti(rng, channels=1, n=4)
    x = rng.uniform(-1, 1, (32768, 1))
    y = ssm_scan(x, d, p.C)
    assert np.all(np.isfinite(y))
    bound = np.abs(p.C * d.B_bar).sum() / (1 - np.abs(d.A_bar).max())
    assert np.abs(y).max() <= bound


# -- selective scan ----------------------------------------------------------

def scan_inputs(rng, nb=2, L=16, E=4, N=3, req=True):
    mk = lambda *s: ad.Tensor(rng.standard_normal(s) * 0.5, requires_grad=req)
    x = mk(nb, L, E)
    delta = ad.Tensor(rng.uniform(0.05, 0.8, (nb, L, E)), requires_grad=req)
    A = ad.Tensor(-rng.uniform(0.2, 2, (E, N)), requires_grad=req)
    return x, delta, A, mk(nb, L, N), mk(nb, L, N), mk(E)


def test_selective_scan_zero_projections_is_skip():
    rng = np.random.default_rng(0)
    x, delta, A, _, _, D = scan_inputs(rng)
    z = np.zeros((2, 16, 3))
    y = selective_scan(x, delta, A, z, z, D)
    np.testing.assert_array_equal(y.data, x.data * D.data)


def test_selective_scan_reduces_to_lti():
    rng = np.random.default_rng(5)
    L, E, N = 40, 3, 4
    A = -rng.uniform(0.1, 2, (E, N))
    b, c = rng.standard_normal(N), rng.standard_normal(N)
    dt = 0.1
    x = rng.standard_normal((1, L, E))
    y = selective_scan(x, np.full((1, L, E), dt), A, np.tile(b, (1, L, 1)),
                       np.tile(c, (1, L, 1)), np.zeros(E)).data[0]
    d = zoh_discretize(A, np.tile(b, (E, 1)), dt)
    np.testing.assert_allclose(y, ssm_scan(x[0], d, np.tile(c, (E, 1))), atol=1e-9)


def test_selective_scan_matches_composed_reference():
    rng = np.random.default_rng(1)
    args = scan_inputs(rng, req=False)
    np.testing.assert_allclose(selective_scan(*args).data,
                               selective_scan_reference(*args).data, atol=1e-12)


def test_selective_scan_gradients():
    rng = np.random.default_rng(2)
    args = scan_inputs(rng)
    w = rng.standard_normal((2, 16, 4))
    errs = check_gradients(lambda: ad.sum_(selective_scan(*args) * w), list(args))
    assert max(errs.values()) < 1e-6, errs


def test_selective_scan_nonfinite_names_step():
    rng = np.random.default_rng(0)
    x, delta, A, B, C, D = scan_inputs(rng, req=False)
    x.data[0, 5, 1] = np.nan
    with pytest.raises(FloatingPointError, match="time step 5"):
        selective_scan(x, delta, A, B, C, D)


def small_cfg():
    return MambaBlockConfig(d_model=3, d_inner=4, d_state=3, conv_width=3)


def test_mamba_block_gradients_small():
    rng = np.random.default_rng(4)
    blk = MambaBlock(small_cfg(), rng)
    assert blk.num_params() <= 500
    x = ad.Tensor(rng.standard_normal((2, 8, 3)))
    w = rng.standard_normal((2, 8, 3))
    errs = check_gradients(lambda: ad.mean(blk(x) * w), blk.parameters())
    assert max(errs.values()) < 1e-4, errs


def test_mamba_block_zero_out_proj():
    rng = np.random.default_rng(0)
    blk = MambaBlock(small_cfg(), rng)
    blk.out_proj.weight.data[:] = 0
    for L in (1, 7, 100):
        out = blk(ad.Tensor(rng.standard_normal((1, L, 3))))
        assert out.shape == (1, L, 3)
        np.testing.assert_array_equal(out.data, 0.0)


@pytest.mark.parametrize("dt_rank", [None, 1])
def test_mamba_causality_bit_exact(dt_rank):
    rng = np.random.default_rng(6)
    cfg = MambaBlockConfig(d_model=4, d_inner=8, d_state=4, dt_rank=dt_rank)
    model = MambaModel(2, 1, cfg, 2, rng)
    x = rng.standard_normal((1, 80, 2))
    y0 = model(ad.Tensor(x)).data
    x[0, 50] += 1.0
    y1 = model(ad.Tensor(x)).data
    np.testing.assert_array_equal(y0[0, :50], y1[0, :50])
    assert not np.array_equal(y0[0, 50:], y1[0, 50:])


def test_mamba_model_zero_weights_gives_head_bias():
    rng = np.random.default_rng(0)
    model = MambaModel(1, 1, MambaBlockConfig(), 1, rng)
    for p in model.parameters():
        p.data = np.zeros_like(p.data)
    model.head.bias.data = np.array([0.37])
    out = model(ad.Tensor(rng.standard_normal((2, 11, 1))))
    np.testing.assert_array_equal(out.data, 0.37)


def test_mamba_param_count_stable():
    counts = {MambaModel(1, 1, MambaBlockConfig(d_model=16, d_state=16), 1,
                         np.random.default_rng(s)).num_params() for s in range(3)}
    assert counts == {4401}


def test_mamba_model_rejects_wrong_width():
    model = MambaModel(2, 1, small_cfg(), 1, np.random.default_rng(0))
    with pytest.raises(ValueError, match="input channels"):
        model(ad.Tensor(np.zeros((1, 4, 3))))
