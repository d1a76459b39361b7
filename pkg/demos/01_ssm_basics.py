"""A diagonal state-space layer three ways: recurrence, convolution, selective scan.

Run: python demos/01_ssm_basics.py
"""
import numpy as np

from ssop import autodiff as ad
from ssop.ssm import (MambaBlockConfig, MambaModel, SSMParams, selective_scan, ssm_conv,
                      ssm_kernel, ssm_scan, zoh_discretize)

rng = np.random.default_rng(0)

# A 2-channel system with 4 decaying modes per channel.
A = -rng.uniform(0.1, 2.0, (2, 4))
p = SSMParams.from_A(A, rng.standard_normal((2, 4)), rng.standard_normal((2, 4)), delta=0.1)

# Zero-order hold: the input is held constant over each step of length delta.
d = zoh_discretize(p)
print("A_bar (channel 0):", np.round(d.A_bar[0], 4))
print("exp(delta*A)     :", np.round(np.exp(0.1 * A[0]), 4))

# The same linear time-invariant system run as a recurrence and as one causal
# convolution with the impulse response K = (C B_bar, C A_bar B_bar, ...).
x = rng.uniform(-1, 1, (200, 2))
y_rec = ssm_scan(x, d, p.C)
K = ssm_kernel(d, p.C, len(x))
y_conv = ssm_conv(x, K)
print("max |recurrence - convolution| =", np.abs(y_rec - y_conv).max())

# Selective scan: step size, B and C change with every time step. With constant
# per-step values it falls back to the time-invariant recurrence above.
L, E, N = 200, 2, 4
delta = np.full((1, L, E), 0.1)
Bm = np.broadcast_to(p.B[0], (1, L, N)).copy()
Cm = np.broadcast_to(p.C[0], (1, L, N)).copy()
shared = SSMParams.from_A(A, np.tile(p.B[0], (2, 1)), np.tile(p.C[0], (2, 1)), 0.1)
y_sel = selective_scan(ad.Tensor(x[None]), ad.Tensor(delta), ad.Tensor(A), ad.Tensor(Bm),
                       ad.Tensor(Cm), ad.Tensor(np.zeros(E))).data[0]
y_lti = ssm_scan(x, zoh_discretize(shared), shared.C)
print("max |selective (constant) - LTI| =", np.abs(y_sel - y_lti).max())

# A full model is causal: changing the input at step 120 leaves steps < 120 untouched.
model = MambaModel(1, 1, MambaBlockConfig(d_model=8, d_inner=16, d_state=4), 1, rng)
u = rng.standard_normal((1, 200, 1))
before = model(ad.Tensor(u)).data
u[0, 120] += 1.0
after = model(ad.Tensor(u)).data
print("prefix unchanged:", np.array_equal(before[0, :120], after[0, :120]),
      "| suffix changed:", not np.array_equal(before[0, 120:], after[0, 120:]))
print("parameters:", model.num_params())
