"""Diagonal state-space layers: continuous, recurrent and convolutional forms,
plus the input-selective (Mamba) block and a stacked sequence model.

Shapes follow ``[batch, time, channels]`` for model inputs. The plain LTI
helpers (``ssm_scan``, ``ssm_kernel``, ``ssm_conv``) work on bare numpy arrays
shaped ``[time, channels]`` with a per-channel diagonal state of size ``N``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_node
from .layers import LayerNorm, Linear, Module, param, uniform_fan_in

_SERIES_CUTOFF = 1e-8     # phi(z) switches to its Taylor series below this |z|
_DPHI_CUTOFF = 1e-4       # phi'(z) does the same (cancellation is worse there)


def phi(z: np.ndarray) -> np.ndarray:
    """``(exp(z) - 1) / z`` with the removable singularity at 0 filled in."""
    z = np.asarray(z)
    small = np.abs(z) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2 + z * z / 6, np.expm1(safe) / safe)


def dphi(z: np.ndarray) -> np.ndarray:
    """Derivative of :func:`phi`."""
    z = np.asarray(z)
    small = np.abs(z) < _DPHI_CUTOFF
    safe = np.where(small, 1.0, z)
    exact = (np.exp(safe) - phi(safe)) / safe
    return np.where(small, 0.5 + z / 3 + z * z / 8, exact)


@dataclass
class SSMParams:
    """Diagonal continuous-time system ``h' = A h + B x``, ``y = C h``.

    ``A_log`` stores ``log(-A)`` so any real value gives a stable ``A < 0``.
    All of ``A_log``, ``B``, ``C`` are ``[channels, N]``.
    """

    A_log: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float | np.ndarray

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)

    @property
    def state_size(self) -> int:
        return self.A_log.shape[-1]

    @classmethod
    def from_A(cls, A, B, C, delta) -> SSMParams:
        A = np.asarray(A, dtype=float)
        if np.any(A >= 0):
            raise ValueError("SSMParams: every A entry must be negative")
        return cls(np.log(-A), np.asarray(B, float), np.asarray(C, float), delta)


@dataclass
class DiscreteSSM:
    A_bar: np.ndarray
    B_bar: np.ndarray


def zoh_discretize(A, B=None, delta=None) -> DiscreteSSM:
    """Zero-order-hold discretisation of a diagonal system.

    ``A_bar = exp(delta*A)`` and ``B_bar = phi(delta*A) * delta * B`` with
    ``phi(z) = (e^z - 1)/z``, which equals ``(dA)^-1 (exp(dA) - I) dB`` for
    diagonal ``A`` and tends to ``delta*B`` as ``A -> 0``.
    Accepts an :class:`SSMParams` as the first argument.
    """
    if isinstance(A, SSMParams):
        A, B, delta = A.A, A.B, A.delta
    A = np.asarray(A)
    B = np.asarray(B)
    delta = np.asarray(delta, dtype=float)
    if np.any(delta <= 0) or not np.all(np.isfinite(delta)):
        raise ValueError("zoh_discretize: delta must be positive and finite")
    z = delta * A
    return DiscreteSSM(np.exp(z), phi(z) * delta * B)


def _as_2d(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    return (x[:, None], True) if x.ndim == 1 else (x, False)


def ssm_scan(x: np.ndarray, d: DiscreteSSM, C: np.ndarray) -> np.ndarray:
    """Run the recurrence ``h_t = A_bar h_{t-1} + B_bar x_t`` from ``h_0 = 0``.

    ``x`` is ``[L, channels]`` (or ``[L]`` for one channel) and the output
    ``y_t = sum_n C h_t`` has the same shape.
    """
    x, squeeze = _as_2d(x)
    Ab = np.broadcast_to(d.A_bar, (x.shape[1], d.A_bar.shape[-1]))
    Bb = np.broadcast_to(d.B_bar, Ab.shape)
    C = np.broadcast_to(np.asarray(C), Ab.shape)
    h = np.zeros(Ab.shape, dtype=np.result_type(Ab, Bb))
    y = np.zeros(x.shape, dtype=np.result_type(h, C))
    for t in range(x.shape[0]):
        h = Ab * h + Bb * x[t][:, None]
        y[t] = (C * h).sum(axis=-1)
    if np.iscomplexobj(y):
        y = y.real
    return y[:, 0] if squeeze else y


def ssm_kernel(d: DiscreteSSM, C: np.ndarray, L: int) -> np.ndarray:
    """``K[k] = C A_bar^k B_bar`` for ``k < L``, shaped ``[L, channels]``."""
    if L < 1:
        raise ValueError(f"ssm_kernel: L must be >= 1, got {L}")
    Ab = np.atleast_2d(d.A_bar)
    CB = np.atleast_2d(np.asarray(C) * d.B_bar)
    k = np.arange(L)[:, None, None]
    K = (CB[None] * Ab[None] ** k).sum(axis=-1)
    return K.real if np.iscomplexobj(K) else K


def ssm_conv(x: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Causal convolution ``y_t = sum_{k<=t} K[k] x_{t-k}`` via a zero-padded FFT."""
    x, squeeze = _as_2d(x)
    K, _ = _as_2d(K)
    if K.shape[0] != x.shape[0]:
        raise ValueError(f"ssm_conv: kernel length {K.shape[0]} != sequence length {x.shape[0]}")
    L = x.shape[0]
    n = 1 << max(0, (2 * L - 2).bit_length())  # power of two >= 2L-1
    y = np.fft.irfft(np.fft.rfft(x, n, axis=0) * np.fft.rfft(K, n, axis=0), n, axis=0)[:L]
    return y[:, 0] if squeeze else y


# ---------------------------------------------------------------------------
# selective scan


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise FloatingPointError(f"selective_scan: non-finite {what} at time step {bad[1]}")


def _phi_parts(dA: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """``(exp(dA), phi(dA), min|dA|)`` sharing one ``expm1`` evaluation."""
    em1 = np.expm1(dA)
    absmin = float(np.abs(dA).min(initial=np.inf))
    if absmin < _SERIES_CUTOFF:
        ph = phi(dA)
    else:
        ph = em1 / dA
    em1 += 1.0
    return em1, ph, absmin


def selective_scan(x, delta, A, Bm, Cm, D) -> Tensor:
    """Input-dependent diagonal SSM with a hand-written backward pass.

    Shapes: ``x, delta: [B, L, E]``, ``A: [E, N]``, ``Bm, Cm: [B, L, N]``,
    ``D: [E]``. Per step::

        A_bar_t = exp(delta_t A)
        B_bar_t = phi(delta_t A) delta_t B_t
        h_t     = A_bar_t * h_{t-1} + B_bar_t x_t
        y_t     = h_t . C_t + D x_t

    The backward sweep runs the adjoint recurrence right to left, which keeps
    the graph to a single node instead of ``L`` small ones. Internally the
    4-d work arrays are time-major so each scan step touches contiguous memory.
    """
    x, delta, A, Bm, Cm, D = (ad.tensor(v) for v in (x, delta, A, Bm, Cm, D))
    xs, dl, Av, Bv, Cv, Dv = x.data, delta.data, A.data, Bm.data, Cm.data, D.data
    if xs.ndim != 3 or dl.shape != xs.shape:
        raise ValueError(f"selective_scan: x {xs.shape} and delta {dl.shape} must match [B, L, E]")
    nb, L, E = xs.shape
    N = Av.shape[-1]
    if Av.shape != (E, N) or Bv.shape != (nb, L, N) or Cv.shape != (nb, L, N) or Dv.shape != (E,):
        raise ValueError(f"selective_scan: A {Av.shape}, B {Bv.shape}, C {Cv.shape}, "
                         f"D {Dv.shape} do not conform with x {xs.shape}")
    _check_finite(xs, "input")
    # time-major views: [L, B, ...]
    xT, dlT = xs.transpose(1, 0, 2), dl.transpose(1, 0, 2)
    BT, CT = Bv.transpose(1, 0, 2), Cv.transpose(1, 0, 2)
    dA = dlT[..., None] * Av                    # [L, B, E, N]
    Abar, ph, absmin = _phi_parts(dA)
    dlx = dlT * xT
    # h starts as the input term u_t = B_bar_t x_t and is scanned in place
    hs = ph * dlx[..., None]
    hs *= BT[:, :, None, :]
    for t in range(1, L):
        hs[t] += Abar[t] * hs[t - 1]
    y = (np.matmul(hs, CT[..., None])[..., 0] + xT * Dv).transpose(1, 0, 2)
    y = np.ascontiguousarray(y)
    if not np.all(np.isfinite(y)):
        _check_finite(hs.transpose(1, 0, 2, 3), "hidden state")
        _check_finite(y, "output")

    def bw(gy):
        gD = (gy * xs).sum(axis=(0, 1))
        gx = gy * Dv
        gyT = gy.transpose(1, 0, 2)
        gC = np.matmul(gyT[:, :, None, :], hs)[:, :, 0, :]
        # adjoint recurrence: gh_t = gy_t C_t + A_bar_{t+1} gh_{t+1}
        gh = gyT[..., None] * CT[:, :, None, :]
        for t in range(L - 2, -1, -1):
            gh[t] += Abar[t + 1] * gh[t + 1]
        r = gh * ph
        s = np.matmul(r, BT[..., None])[..., 0]           # sum_n gh phi B
        gxT = gx.transpose(1, 0, 2)
        gxT += dlT * s
        gdelta = xT * s
        gB = np.matmul(dlx[:, :, None, :], r)[:, :, 0, :]
        # A_bar_t h_{t-1} = h_t - u_t, and phi' = (A_bar - phi) / dA
        w = Abar - ph
        w /= dA
        if absmin < _DPHI_CUTOFF:
            small = np.abs(dA) < _DPHI_CUTOFF
            w[small] = dphi(dA[small])
        w -= ph
        w *= dlx[..., None]
        w *= BT[:, :, None, :]
        w += hs
        w *= gh                                             # = dL/d(dA)
        gdelta += np.einsum("lben,en->lbe", w, Av)
        gA = np.einsum("lben,lbe->en", w, dlT)
        return (gx, np.ascontiguousarray(gdelta.transpose(1, 0, 2)), gA,
                np.ascontiguousarray(gB.transpose(1, 0, 2)),
                np.ascontiguousarray(gC.transpose(1, 0, 2)), gD)

    return make_node(y, (x, delta, A, Bm, Cm, D), bw, "selective_scan")


def selective_scan_reference(x, delta, A, Bm, Cm, D) -> Tensor:
    """Same map as :func:`selective_scan` composed from generic primitives.

    Slow and graph-heavy; it exists to cross-check the fused backward pass.
    """
    dA = ad.tensor(delta)[..., None] * A                         # [B, L, E, N]
    Abar = ad.exp(dA)
    Bbar = ad.expm1(dA) / dA * delta[..., None] * Bm[:, :, None, :]
    u = Bbar * x[..., None]
    h = None
    ys = []
    for t in range(x.shape[1]):
        h = u[:, t] if h is None else Abar[:, t] * h + u[:, t]
        ys.append(ad.sum_(h * Cm[:, t][:, None, :], axis=-1))
    return ad.stack(ys, axis=1) + x * D


# ---------------------------------------------------------------------------
# Mamba block and model


@dataclass
class MambaBlockConfig:
    d_model: int = 16
    d_inner: int = 32
    d_state: int = 16
    conv_width: int = 4
    dt_rank: int | None = None   # None -> full-rank delta projection
    dt_min: float = 1e-3
    dt_max: float = 0.1

    def validate(self) -> None:
        if self.d_inner < self.d_model:
            raise ValueError("MambaBlockConfig: d_inner must be >= d_model")
        if self.conv_width < 1 or self.d_state < 1:
            raise ValueError("MambaBlockConfig: conv_width and d_state must be >= 1")


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class MambaBlock(Module):
    """Gated selective-SSM block.

    Left branch: linear -> causal depthwise conv -> SiLU -> selective scan.
    Right branch: linear -> SiLU. The branches multiply and a final linear
    map returns to ``d_model`` channels.
    """

    def __init__(self, cfg: MambaBlockConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        D, E, N, K = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.conv_width
        self.in_proj = Linear(D, 2 * E, rng, bias=False)
        self.conv_w = uniform_fan_in(rng, (E, K), K)
        self.conv_b = uniform_fan_in(rng, (E,), K)
        if cfg.dt_rank is None:
            self.dt_proj = Linear(E, E, rng, bias=False)
            self.dt_down = None
        else:
            self.dt_down = Linear(E, cfg.dt_rank, rng, bias=False)
            self.dt_proj = Linear(cfg.dt_rank, E, rng, bias=False)
        dt = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), E))
        self.dt_bias = param(inverse_softplus(dt))
        self.B_proj = Linear(E, N, rng, bias=False)
        self.C_proj = Linear(E, N, rng, bias=False)
        self.A_log = param(np.log(np.tile(np.arange(1, N + 1, dtype=float), (E, 1))))
        self.D = param(np.ones(E))
        self.out_proj = Linear(E, D, rng, bias=False)

    def forward(self, x):
        E = self.cfg.d_inner
        xz = self.in_proj(x)
        xi, z = xz[..., :E], xz[..., E:]
        xc = ad.silu(ad.causal_conv1d(xi, self.conv_w, self.conv_b))
        dt_in = xc if self.dt_down is None else self.dt_down(xc)
        delta = ad.softplus(self.dt_proj(dt_in) + self.dt_bias)
        A = ad.neg(ad.exp(self.A_log))
        y = selective_scan(xc, delta, A, self.B_proj(xc), self.C_proj(xc), self.D)
        return self.out_proj(y * ad.silu(z))


class MambaModel(Module):
    """Embedding, ``n_blocks`` pre-norm residual Mamba blocks, linear head."""

    def __init__(self, in_dim: int, out_dim: int, cfg: MambaBlockConfig,
                 n_blocks: int, rng: np.random.Generator):
        self.in_dim = in_dim
        self.embed = Linear(in_dim, cfg.d_model, rng)
        self.norms = [LayerNorm(cfg.d_model) for _ in range(n_blocks)]
        self.blocks = [MambaBlock(cfg, rng) for _ in range(n_blocks)]
        self.head = Linear(cfg.d_model, out_dim, rng)

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"MambaModel: expected {self.in_dim} input channels, got {x.shape[-1]}")
        h = self.embed(x)
        for norm, block in zip(self.norms, self.blocks):
            h = h + block(norm(h))
        return self.head(h)
