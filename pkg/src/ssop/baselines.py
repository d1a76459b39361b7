"""Comparison models: gated RNNs, Transformer blocks, DeepONet, FNO and LNO.

Every model maps ``x [B, L, in_dim]`` to ``[B, L, out_dim]``. Models whose
weights are tied to the sequence length (DeepONet's branch input, the
spectral operators' grid) set ``variable_length = False``.
"""
from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, make_node
from .layers import MLP, Linear, Module, activation, param, uniform_fan_in


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# recurrent cells (fused over time with a hand-written backward)


def gru_scan(gi, W_hh, b_hh) -> Tensor:
    """GRU recurrence over precomputed input gates ``gi [B, L, 3H]``.

    Gate order (r, z, n), with ``a = h_{t-1} W_hh + b_hh``::

        r = sigmoid(gi_r + a_r)
        z = sigmoid(gi_z + a_z)
        n = tanh(gi_n + r * a_n)
        h_t = (1 - z) * n + z * h_{t-1}

    ``h_0 = 0``. Returns the hidden states ``[B, L, H]``.
    """
    gi, W_hh, b_hh = ad._lift(gi), ad._lift(W_hh), ad._lift(b_hh)
    B, L, H3 = gi.shape
    H = H3 // 3
    if H3 != 3 * H or W_hh.shape != (H, H3) or b_hh.shape != (H3,):
        raise ValueError(f"gru_scan: gi {gi.shape}, W_hh {W_hh.shape}, b_hh {b_hh.shape} do not conform")
    G = np.moveaxis(gi.data, 1, 0)
    W, b = W_hh.data, b_hh.data
    hs = np.zeros((L + 1, B, H))
    r = np.empty((L, B, H))
    z = np.empty((L, B, H))
    n = np.empty((L, B, H))
    an = np.empty((L, B, H))
    for t in range(L):
        a = hs[t] @ W + b
        r[t] = _sigmoid(G[t, :, :H] + a[:, :H])
        z[t] = _sigmoid(G[t, :, H:2 * H] + a[:, H:2 * H])
        an[t] = a[:, 2 * H:]
        n[t] = np.tanh(G[t, :, 2 * H:] + r[t] * an[t])
        hs[t + 1] = n[t] + z[t] * (hs[t] - n[t])

    def bw(g):
        g = np.moveaxis(g, 1, 0)
        dG = np.empty((L, B, H3))
        dW = np.zeros_like(W)
        db = np.zeros_like(b)
        dh = np.zeros((B, H))
        for t in range(L - 1, -1, -1):
            dh = dh + g[t]
            dn = dh * (1 - z[t])
            dz = dh * (hs[t] - n[t])
            dpn = dn * (1 - n[t] ** 2)
            dpr = dpn * an[t] * r[t] * (1 - r[t])
            dpz = dz * z[t] * (1 - z[t])
            da = np.concatenate([dpr, dpz, dpn * r[t]], axis=-1)
            dG[t] = np.concatenate([dpr, dpz, dpn], axis=-1)
            dW += hs[t].T @ da
            db += da.sum(axis=0)
            dh = dh * z[t] + da @ W.T
        return np.moveaxis(dG, 0, 1), dW, db

    return make_node(np.moveaxis(hs[1:], 0, 1).copy(), (gi, W_hh, b_hh), bw, "gru_scan")


def lstm_scan(gi, W_hh, b_hh) -> Tensor:
    """LSTM recurrence over precomputed input gates ``gi [B, L, 4H]``.

    Gate order (i, f, g, o), with ``p = gi + h_{t-1} W_hh + b_hh``::

        c_t = sigmoid(p_f) * c_{t-1} + sigmoid(p_i) * tanh(p_g)
        h_t = sigmoid(p_o) * tanh(c_t)

    ``h_0 = c_0 = 0``. Returns the hidden states ``[B, L, H]``.
    """
    gi, W_hh, b_hh = ad._lift(gi), ad._lift(W_hh), ad._lift(b_hh)
    B, L, H4 = gi.shape
    H = H4 // 4
    if H4 != 4 * H or W_hh.shape != (H, H4) or b_hh.shape != (H4,):
        raise ValueError(f"lstm_scan: gi {gi.shape}, W_hh {W_hh.shape}, b_hh {b_hh.shape} do not conform")
    G = np.moveaxis(gi.data, 1, 0)
    W, b = W_hh.data, b_hh.data
    hs = np.zeros((L + 1, B, H))
    cs = np.zeros((L + 1, B, H))
    gates = np.empty((L, B, H4))
    for t in range(L):
        p = G[t] + hs[t] @ W + b
        i, f, gg, o = (_sigmoid(p[:, :H]), _sigmoid(p[:, H:2 * H]),
                       np.tanh(p[:, 2 * H:3 * H]), _sigmoid(p[:, 3 * H:]))
        gates[t] = np.concatenate([i, f, gg, o], axis=-1)
        cs[t + 1] = f * cs[t] + i * gg
        hs[t + 1] = o * np.tanh(cs[t + 1])

    def bw(g):
        g = np.moveaxis(g, 1, 0)
        dG = np.empty((L, B, H4))
        dW = np.zeros_like(W)
        db = np.zeros_like(b)
        dh = np.zeros((B, H))
        dc = np.zeros((B, H))
        for t in range(L - 1, -1, -1):
            i, f, gg, o = (gates[t, :, k * H:(k + 1) * H] for k in range(4))
            dh = dh + g[t]
            tc = np.tanh(cs[t + 1])
            dc = dc + dh * o * (1 - tc ** 2)
            dp = np.concatenate([dc * gg * i * (1 - i), dc * cs[t] * f * (1 - f),
                                 dc * i * (1 - gg ** 2), dh * tc * o * (1 - o)], axis=-1)
            dG[t] = dp
            dW += hs[t].T @ dp
            db += dp.sum(axis=0)
            dh = dp @ W.T
            dc = dc * f
        return np.moveaxis(dG, 0, 1), dW, db

    return make_node(np.moveaxis(hs[1:], 0, 1).copy(), (gi, W_hh, b_hh), bw, "lstm_scan")


class RNN(Module):
    """Input embedding, one or more GRU/LSTM layers, linear output map ``y_t = g(h_t)``.

    Each recurrent layer carries separate input and hidden biases, so
    ``hidden=32`` with scalar input and output has 6433 (GRU) or 8545
    (LSTM) parameters.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: int, rng: np.random.Generator,
                 cell: str = "gru", n_layers: int = 1):
        if cell not in ("gru", "lstm"):
            raise ValueError(f"RNN: unknown cell {cell!r}")
        self.cell = cell
        gates = 3 if cell == "gru" else 4
        self.embed = Linear(in_dim, hidden, rng)
        self.W_ih = [Linear(hidden, gates * hidden, rng) for _ in range(n_layers)]
        self.W_hh = [uniform_fan_in(rng, (hidden, gates * hidden), hidden) for _ in range(n_layers)]
        self.b_hh = [uniform_fan_in(rng, (gates * hidden,), hidden) for _ in range(n_layers)]
        self.head = Linear(hidden, out_dim, rng)

    def forward(self, x):
        scan = gru_scan if self.cell == "gru" else lstm_scan
        h = self.embed(x)
        for W_ih, W_hh, b_hh in zip(self.W_ih, self.W_hh, self.b_hh):
            h = scan(W_ih(h), W_hh, b_hh)
        return self.head(h)


# ---------------------------------------------------------------------------
# attention


def attention(q, k, v) -> Tensor:
    """Scale-dot softmax attention over the last two axes, scale ``1/sqrt(d_head)``."""
    return ad.scaled_dot_attention(q, k, v)


def attention_weights(q, k) -> np.ndarray:
    """The softmax matrix of :func:`attention` (no graph), for inspection."""
    q, k = np.asarray(q, float), np.asarray(k, float)
    s = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def galerkin_attention(q, k, v) -> Tensor:
    """``Q (LN(K)^T LN(V)) / d`` with ``d = q.shape[-1]``; cost is linear in ``n``.

    LN is the affine-free layer normalisation over features, so a constant
    key row normalises to zero.
    """
    q, k, v = ad._lift(q), ad._lift(k), ad._lift(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"galerkin_attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    kv = ad.matmul(ad.swapaxes(ad.layer_norm(k), -1, -2), ad.layer_norm(v))
    return ad.matmul(q, kv) / float(q.shape[-1])


class MultiHeadAttention(Module):
    """Per-head attention on ``d/heads`` channels, heads concatenated then mixed by ``W_O``."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, kind: str = "softmax"):
        if d % heads:
            raise ValueError(f"MultiHeadAttention: d={d} not divisible by heads={heads}")
        if kind not in ("softmax", "galerkin"):
            raise ValueError(f"MultiHeadAttention: unknown kind {kind!r}")
        self.d, self.heads, self.kind = d, heads, kind
        self.W_Q = Linear(d, d, rng, bias=False)
        self.W_K = Linear(d, d, rng, bias=False)
        self.W_V = Linear(d, d, rng, bias=False)
        self.W_O = Linear(d, d, rng, bias=False)

    def _split(self, x):
        B, n, _ = x.shape
        return ad.transpose(ad.reshape(x, (B, n, self.heads, self.d // self.heads)), (0, 2, 1, 3))

    def forward(self, x):
        B, n, _ = x.shape
        q, k, v = self._split(self.W_Q(x)), self._split(self.W_K(x)), self._split(self.W_V(x))
        y = attention(q, k, v) if self.kind == "softmax" else galerkin_attention(q, k, v)
        y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (B, n, self.d))
        return self.W_O(y)


class FFN(Module):
    """``ReLU(X W1 + B1) W2 + B2``."""

    def __init__(self, d: int, inner: int, rng: np.random.Generator):
        if inner < 1:
            raise ValueError("FFN: inner width must be >= 1")
        self.lin1 = Linear(d, inner, rng)
        self.lin2 = Linear(inner, d, rng)

    def forward(self, x):
        return self.lin2(ad.relu(self.lin1(x)))


class TransformerBlock(Module):
    """``X' = Attn(X) + X``, ``Y = FFN(X') + X'``."""

    def __init__(self, d: int, heads: int, ffn: int, rng: np.random.Generator, kind: str = "softmax"):
        self.attn = MultiHeadAttention(d, heads, rng, kind)
        self.ffn = FFN(d, ffn, rng)

    def forward(self, x):
        x = self.attn(x) + x
        return self.ffn(x) + x


class TransformerModel(Module):
    def __init__(self, in_dim: int, out_dim: int, d: int, heads: int, ffn: int,
                 n_layers: int, rng: np.random.Generator, kind: str = "softmax"):
        self.embed = Linear(in_dim, d, rng)
        self.blocks = [TransformerBlock(d, heads, ffn, rng, kind) for _ in range(n_layers)]
        self.head = Linear(d, out_dim, rng)

    def forward(self, x):
        h = self.embed(x)
        for blk in self.blocks:
            h = blk(h)
        return self.head(h)


# ---------------------------------------------------------------------------
# DeepONet


class DeepONet(Module):
    """``out(t) = B(u_sensors) . T(t)`` with equal-depth branch and trunk MLPs.

    The branch sees every input channel at every sensor (flattened), the
    trunk sees the scalar query time. For ``out_dim > 1`` the latent vectors
    are split into ``out_dim`` groups of ``p``.
    """

    variable_length = False

    def __init__(self, n_sensors: int, in_dim: int, grid, rng: np.random.Generator,
                 width: int = 24, depth: int = 5, p: int = 24, out_dim: int = 1, act: str = "tanh"):
        self.n_sensors, self.in_dim, self.out_dim, self.p = n_sensors, in_dim, out_dim, p
        self.grid = np.asarray(grid, float)
        hidden = [width] * (depth - 1)
        self.branch = MLP([n_sensors * in_dim] + hidden + [p * out_dim], rng, act)
        self.trunk = MLP([1] + hidden + [p * out_dim], rng, act)

    def encode(self, x):
        B, L, C = x.shape
        if L != self.n_sensors or C != self.in_dim:
            raise ValueError(f"DeepONet: built for {self.n_sensors} sensors x {self.in_dim} channels, "
                             f"got {L} x {C}")
        return ad.reshape(self.branch(ad.reshape(x, (B, L * C))), (B, self.out_dim, self.p))

    def forward(self, x, t=None):
        b = self.encode(x)
        t = self.grid if t is None else np.asarray(t, float)
        tr = ad.reshape(self.trunk(Tensor(t[:, None])), (len(t), self.out_dim, self.p))
        return ad.einsum("bop,top->bto", b, tr)


# ---------------------------------------------------------------------------
# Fourier neural operator


def fno_spectral(x, weights) -> Tensor:
    """Spectral convolution along time: keep the lowest ``M`` rfft modes of
    ``x [B, L, Cin]``, mix channels with ``weights [M, Cin, Cout]`` (complex),
    zero the rest and transform back."""
    x, weights = ad._lift(x), ad._lift(weights)
    L = x.shape[-2]
    M = weights.shape[0]
    if M > L // 2 + 1:
        raise ValueError(f"fno_spectral: {M} modes exceed the {L // 2 + 1} available for length {L}")
    X = ad.rfft(x, axis=-2)
    Y = ad.einsum("bmi,mio->bmo", X[:, :M, :], weights)
    return ad.irfft(Y, n=L, axis=-2)


class FNOLayer(Module):
    """Spectral path plus pointwise linear path (no activation)."""

    def __init__(self, width: int, modes: int, rng: np.random.Generator):
        scale = 1.0 / (width * width)
        self.weights = param(scale * (rng.uniform(size=(modes, width, width))
                                      + 1j * rng.uniform(size=(modes, width, width))))
        self.pointwise = Linear(width, width, rng)

    def forward(self, x):
        return fno_spectral(x, self.weights) + self.pointwise(x)


class FNO(Module):
    """Lift, ``n_layers`` Fourier layers with GELU between them, project."""

    variable_length = False

    def __init__(self, in_dim: int, out_dim: int, width: int, modes: int, n_layers: int,
                 rng: np.random.Generator):
        self.lift = Linear(in_dim, width, rng)
        self.layers = [FNOLayer(width, modes, rng) for _ in range(n_layers)]
        self.proj = Linear(width, out_dim, rng)

    def forward(self, x):
        h = self.lift(x)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.gelu(h)
        return self.proj(h)


# ---------------------------------------------------------------------------
# Laplace neural operator


def lno_apply(x, poles, residues, dt: float, modes: int) -> Tensor:
    """Pole-residue kernel integral on a uniform grid ``t_j = j dt``.

    ``x [B, L, Cin]`` is expanded in the Fourier modes ``l = -(M-1)..M-1``
    (``alpha_l``, frequency ``w_l = 2 pi l / (L dt)``). With poles ``mu`` and
    residues ``beta`` of shape ``[Cin, Cout, N]``::

        gamma_n  = beta_n sum_l alpha_l / (mu_n - i w_l)
        lambda_l = alpha_l sum_n beta_n / (i w_l - mu_n)
        v(t)     = Re[ sum_n gamma_n exp(mu_n t) + sum_l lambda_l exp(i w_l t) ]

    summed over input channels. The first sum is the transient response and
    the second the steady-state response to the periodic input.
    """
    x, poles, residues = ad._lift(x), ad._lift(poles), ad._lift(residues)
    B, L, C = x.shape
    if poles.ndim != 3 or poles.shape != residues.shape or poles.shape[0] != C:
        raise ValueError(f"lno_apply: x {x.shape}, poles {poles.shape}, residues {residues.shape}")
    if np.any(np.real(poles.data) >= 0):
        raise ValueError("lno_apply: every pole needs a negative real part (decaying transient)")
    if 2 * modes - 1 > L:
        raise ValueError(f"lno_apply: {modes} modes need length >= {2 * modes - 1}, got {L}")
    Cin, Cout, N = poles.shape
    X = ad.rfft(x, axis=-2) / float(L)
    alpha = ad.concat([ad.conj(X[:, modes - 1:0:-1, :]), X[:, :modes, :]], axis=1)  # [B, K, Cin]
    ell = np.arange(-(modes - 1), modes)
    iw = 1j * 2 * np.pi * ell / (L * dt)
    t = np.arange(L) * dt
    R = 1.0 / (ad.reshape(poles, (Cin, Cout, N, 1)) - iw)                 # [Cin, Cout, N, K]
    gamma = ad.einsum("bkc,conk->bcon", alpha, R) * residues
    E = ad.exp(ad.reshape(poles, (Cin, Cout, N, 1)) * t)                 # [Cin, Cout, N, L]
    transient = ad.einsum("bcon,cont->bto", gamma, E)
    S = ad.einsum("con,conk->cok", residues, R)
    W = ad.einsum("bkc,cok->bko", alpha, S)
    steady = ad.einsum("bko,kt->bto", W, np.exp(np.outer(iw, t)))
    return ad.real(transient - steady)


class LNOLayer(Module):
    """Pole-residue kernel with poles ``mu = -exp(log_decay) + i freq``.

    The parameterisation keeps every pole in the left half-plane during
    training; :meth:`set_poles` installs explicit complex poles after
    checking that constraint.
    """

    def __init__(self, c_in: int, c_out: int, n_poles: int, modes: int, dt: float,
                 rng: np.random.Generator, T: float = 1.0):
        self.modes, self.dt = modes, dt
        shape = (c_in, c_out, n_poles)
        # decay rates spread over [0.1, 10] / T so both fast and slow transients are reachable
        self.log_decay = param(np.log(np.exp(rng.uniform(math.log(0.1), math.log(10.0), shape)) / T))
        self.freq = param(rng.uniform(-1.0, 1.0, shape) * math.pi / T)
        scale = 1.0 / (c_in * c_out)
        self.residues = param(scale * (rng.uniform(-1, 1, shape) + 1j * rng.uniform(-1, 1, shape)))

    def poles(self) -> Tensor:
        return ad.complex_(ad.neg(ad.exp(self.log_decay)), self.freq)

    def set_poles(self, mu) -> None:
        mu = np.asarray(mu, dtype=complex)
        if mu.shape != self.freq.shape:
            raise ValueError(f"set_poles: shape {mu.shape} != {self.freq.shape}")
        if np.any(mu.real >= 0):
            raise ValueError("set_poles: every pole needs a negative real part")
        self.log_decay.data = np.log(-mu.real)
        self.freq.data = mu.imag.copy()

    def forward(self, x):
        return lno_apply(x, self.poles(), self.residues, self.dt, self.modes)


class LNO(Module):
    """Lift (input plus time channel), LNO layer plus pointwise path, two-layer head."""

    variable_length = False

    def __init__(self, in_dim: int, out_dim: int, width: int, modes: int, grid,
                 rng: np.random.Generator, head_width: int = 128, act: str = "tanh"):
        grid = np.asarray(grid, float)
        self.grid = grid
        dt = grid[1] - grid[0]
        self.lift = Linear(in_dim + 1, width, rng)
        self.layer = LNOLayer(width, width, modes, modes, dt, rng, T=len(grid) * dt)
        self.pointwise = Linear(width, width, rng)
        self.act = activation(act)
        self.fc1 = Linear(width, head_width, rng)
        self.fc2 = Linear(head_width, out_dim, rng)

    def forward(self, x):
        B, L, _ = x.shape
        if L != len(self.grid):
            raise ValueError(f"LNO: built for length {len(self.grid)}, got {L}")
        t = np.broadcast_to(self.grid[None, :, None], (B, L, 1))
        h = self.lift(ad.concat([x, Tensor(t)], axis=-1))
        h = self.act(self.layer(h) + self.pointwise(h))
        return self.fc2(self.act(self.fc1(h)))
