"""Benchmark dynamical systems, input-function samplers and trajectory generators.

Every generator is deterministic in ``(config, seed)``. Per-sample random
streams come from ``numpy.random.default_rng([seed, index])`` so a subset
of samples regenerates identically whether it is produced alone or inside a
larger batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import TrajectoryDataset


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), int(stream)])


# ---------------------------------------------------------------------------
# Gaussian random fields


@dataclass
class GRFConfig:
    length_scale: float
    grid: np.ndarray
    jitter: float = 1e-10

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        if self.length_scale <= 0:
            raise ValueError("GRFConfig: length_scale must be positive")
        if self.grid.ndim != 1 or np.any(np.diff(self.grid) <= 0):
            raise ValueError("GRFConfig: grid must be one-dimensional and strictly increasing")


def rbf_kernel(x: np.ndarray, y: np.ndarray, length_scale: float) -> np.ndarray:
    d = np.subtract.outer(np.asarray(x, float), np.asarray(y, float))
    return np.exp(-0.5 * (d / length_scale) ** 2)


def grf_factor(cfg: GRFConfig, max_jitter: float = 1e-6) -> np.ndarray:
    """Lower Cholesky factor of the Gram matrix, escalating the jitter by 10x."""
    K = rbf_kernel(cfg.grid, cfg.grid, cfg.length_scale)
    jitter = cfg.jitter
    while True:
        try:
            return np.linalg.cholesky(K + jitter * np.eye(len(K)))
        except np.linalg.LinAlgError:
            if jitter >= max_jitter:
                raise np.linalg.LinAlgError(
                    f"GRF Cholesky failed up to jitter {max_jitter:g} "
                    f"(l={cfg.length_scale}, {len(K)} points)") from None
            jitter = min(jitter * 10.0, max_jitter)


def grf_sample(cfg: GRFConfig, seed: int, count: int, start: int = 0) -> np.ndarray:
    """``count`` zero-mean GRF draws on ``cfg.grid``, shaped ``[count, len(grid)]``."""
    Lc = grf_factor(cfg)
    n = len(cfg.grid)
    z = np.stack([sample_rng(seed, start + i).standard_normal(n) for i in range(count)]) \
        if count else np.zeros((0, n))
    return z @ Lc.T


# ---------------------------------------------------------------------------
# integration


def rk4_integrate(rhs: Callable, y0, grid, substeps: int = 10,
                  post_step: Callable | None = None) -> np.ndarray:
    """Classical RK4 on a uniform ``grid`` with ``substeps`` steps per interval.

    ``rhs(t, y)`` must accept a state of shape ``y0.shape`` (any leading batch
    axes). Returns the states at every grid point, shaped
    ``(len(grid),) + y0.shape``. ``post_step(t, y_old, y_new)`` may return a
    modified state (used for event resets).
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or len(grid) == 0:
        raise ValueError("rk4_integrate: grid must be a non-empty 1-d array")
    if len(grid) > 1:
        steps = np.diff(grid)
        if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
            raise ValueError("rk4_integrate: grid must be uniform")
        h = steps[0] / substeps
    else:
        h = 0.0
    y = np.array(y0, dtype=float)
    out = np.empty((len(grid),) + y.shape)
    out[0] = y
    for i in range(1, len(grid)):
        t0 = grid[i - 1]
        for j in range(substeps):
            t = t0 + j * h
            k1 = rhs(t, y)
            k2 = rhs(t + h / 2, y + (h / 2) * k1)
            k3 = rhs(t + h / 2, y + (h / 2) * k2)
            k4 = rhs(t + h, y + h * k3)
            y_new = y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            if post_step is not None:
                y_new = post_step(t + h, y, y_new)
            y = y_new
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"rk4_integrate: non-finite state at grid index {i} (t={grid[i]:g})")
        out[i] = y
    return out


def grid_forcing(grid: np.ndarray, values: np.ndarray) -> Callable[[float], np.ndarray]:
    """Piecewise-linear interpolant of ``values[..., len(grid)]`` on a uniform grid."""
    grid = np.asarray(grid, float)
    t0, dt, n = grid[0], grid[1] - grid[0], len(grid)

    def f(t: float) -> np.ndarray:
        s = (t - t0) / dt
        i = min(max(int(math.floor(s)), 0), n - 2)
        w = s - i
        return (1 - w) * values[..., i] + w * values[..., i + 1]

    return f


# ---------------------------------------------------------------------------
# system configurations (tagged union: every variant carries ``kind``)


@dataclass
class Antiderivative:
    kind: str = field(default="antiderivative", init=False)

    def rhs(self, t, s, u):
        return u[..., None] + 0.0 * s


@dataclass
class NonlinearODE:
    kind: str = field(default="nonlinear", init=False)

    def rhs(self, t, s, u):
        return (u * u)[..., None] + 0.0 * s


@dataclass
class GravityPendulum:
    """``s1' = s2``, ``s2' = -sin(s1) + u``."""

    kind: str = field(default="pendulum", init=False)

    def rhs(self, t, s, u):
        return np.stack([s[..., 1], -np.sin(s[..., 0]) + u], axis=-1)


@dataclass
class Izhikevich:
    """``u' = 0.04u^2 + 5u + 140 - v + I``, ``v' = a(bu - v)``.

    The first variable is the fast voltage-like one. Both start from
    ``u = u_thres, v = b u_thres``; a spike is registered when ``u`` reaches
    ``u_peak`` and resets ``u <- c, v <- v + d``.
    """

    a: float = 0.02
    b: float = 0.25
    c: float = -55.0
    d: float = 0.05
    u_thres: float = -64.0
    u_peak: float = 30.0
    kind: str = field(default="izhikevich", init=False)

    def rhs(self, t, s, I):
        u, v = s[..., 0], s[..., 1]
        return np.stack([0.04 * u * u + 5 * u + 140 - v + I, self.a * (self.b * u - v)], axis=-1)


@dataclass
class TemperedLIF:
    """Tempered fractional leaky integrate-and-fire neuron (ingestion only)."""

    tau: float = 1.0
    R: float = 1.0
    v_rest: float = 0.0
    alpha: float = 0.5
    sigma_temper: float = 0.0
    kind: str = field(default="tempered_lif", init=False)


@dataclass
class ForcedLorenz:
    sigma: float = 10.0
    rho: float = 5.0
    beta: float = 8.0 / 3.0
    kind: str = field(default="lorenz", init=False)

    def rhs(self, t, s, f):
        x, y, z = s[..., 0], s[..., 1], s[..., 2]
        return np.stack([self.sigma * (y - x), x * (self.rho - z) - y,
                         x * y - self.beta * z - f], axis=-1)

    def initial_state(self, n):
        return np.tile([1.0, 0.0, 0.0], (n, 1))


@dataclass
class Duffing:
    m: float = 1.0
    c: float = 0.5
    k1: float = 1.0
    k3: float = 1.0
    kind: str = field(default="duffing", init=False)

    def rhs(self, t, s, f):
        x, v = s[..., 0], s[..., 1]
        return np.stack([v, (f - self.c * v - self.k1 * x - self.k3 * x ** 3) / self.m], axis=-1)

    def initial_state(self, n):
        return np.zeros((n, 2))


@dataclass
class DrivenPendulum:
    c: float = 0.5
    g_over_l: float = 1.0
    kind: str = field(default="driven_pendulum", init=False)

    def rhs(self, t, s, f):
        x, v = s[..., 0], s[..., 1]
        return np.stack([v, f - self.c * v - self.g_over_l * np.sin(x)], axis=-1)

    def initial_state(self, n):
        return np.zeros((n, 2))


@dataclass
class LorenzIVP:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    x_box: tuple = (-10.0, 10.0)
    y_box: tuple = (-20.0, 30.0)
    z_box: tuple = (10.0, 40.0)
    kind: str = field(default="lorenz_ivp", init=False)

    def rhs(self, t, s):
        x, y, z = s[..., 0], s[..., 1], s[..., 2]
        return np.stack([self.sigma * (y - x), x * (self.rho - z) - y, x * y - self.beta * z],
                        axis=-1)


@dataclass
class PKConstants:
    """Two-compartment PK rates (per hour) and central volume (L/kg)."""

    V1: float = 0.81
    k10: float = 0.868
    k12: float = 0.0060
    k21: float = 0.0838

    def matrix(self) -> np.ndarray:
        return np.array([[-(self.k12 + self.k10), self.k21], [self.k12, -self.k21]])


@dataclass
class PDConstants:
    lambda0: float = 0.273     # 1/day, exponential phase
    lambda1: float = 0.814     # g/day, linear phase
    psi: float = 20.0
    w0: float = 0.05           # g
    k1_mean: float = 1.0
    k1_std: float = 0.5
    k2_mean: float = 6e-4
    k2_std: float = 2e-4


@dataclass
class Schedule:
    doses: tuple = (20, 25, 30, 35, 40, 45)          # mg/kg
    start_days: tuple = tuple(range(1, 14))
    intervals: tuple = (2, 3, 4, 5, 6)               # days
    n_doses: int = 3


@dataclass
class PKPD:
    pk: PKConstants = field(default_factory=PKConstants)
    pd: PDConstants = field(default_factory=PDConstants)
    schedule: Schedule = field(default_factory=Schedule)
    kind: str = field(default="pkpd", init=False)


SYSTEMS = {cls.__dataclass_fields__["kind"].default: cls for cls in
           (Antiderivative, NonlinearODE, GravityPendulum, Izhikevich, TemperedLIF,
            ForcedLorenz, Duffing, DrivenPendulum, LorenzIVP, PKPD)}


def make_system(kind: str, **params):
    try:
        cls = SYSTEMS[kind]
    except KeyError:
        raise ValueError(f"unknown system {kind!r}; choose from {sorted(SYSTEMS)}") from None
    return cls(**params)


# ---------------------------------------------------------------------------
# GRF-driven suites (antiderivative, nonlinear, pendulum)


def deeponet_grid(T: float = 1.0, per_unit: int = 100) -> np.ndarray:
    """Sensors ``{1/per_unit, ..., T}``."""
    n = int(round(T * per_unit))
    return np.arange(1, n + 1) / per_unit


def gen_deeponet_suite(kind: str, n: int, length_scale: float = 0.2, seed: int = 0,
                       T: float = 1.0, substeps: int = 10, u: np.ndarray | None = None,
                       split: str = "train") -> TrajectoryDataset:
    """Map GRF inputs ``u`` to ``s`` (or ``s1``) on the sensors ``0.01..T``.

    The input function is drawn on ``{0, 0.01, ..., T}`` so the integrator has
    ``u(0)``; only the sensor values are stored. Passing ``u`` (shape
    ``[n, len(sensors) + 1]``) bypasses sampling.
    """
    system = {"antiderivative": Antiderivative, "nonlinear": NonlinearODE,
              "pendulum": GravityPendulum}.get(kind)
    if system is None:
        raise ValueError(f"gen_deeponet_suite: unknown kind {kind!r}")
    system = system()
    sensors = deeponet_grid(T)
    full = np.concatenate([[0.0], sensors])
    if u is None:
        u = grf_sample(GRFConfig(length_scale, full), seed, n)
    u = np.asarray(u, float)
    if u.shape != (n, len(full)):
        raise ValueError(f"gen_deeponet_suite: u must be {(n, len(full))}, got {u.shape}")
    force = grid_forcing(full, u)
    dim = 2 if kind == "pendulum" else 1
    traj = rk4_integrate(lambda t, s: system.rhs(t, s, force(t)), np.zeros((n, dim)), full, substeps)
    s = traj[1:, :, 0].T
    meta = {"system": kind, "seed": seed, "split": split, "length_scale": length_scale,
            "T": T, "substeps": substeps}
    return TrajectoryDataset(u[:, 1:, None], s[..., None], sensors, None, meta)


# ---------------------------------------------------------------------------
# forced systems


TRAIN_AMPLITUDES = np.round(0.05 * np.arange(1, 201), 10)
TEST_AMPLITUDES = np.round(0.14 + 0.05 * np.arange(180), 10)


@dataclass
class ForcingSpec:
    family: str = "sin"              # "sin" -> A sin(w t); "decay_sin" -> A exp(-k t) sin(w t)
    amplitudes: np.ndarray = field(default_factory=lambda: TRAIN_AMPLITUDES.copy())
    decay: float = 0.05
    omega: float = 5.0

    def __post_init__(self):
        if self.family not in ("sin", "decay_sin"):
            raise ValueError(f"ForcingSpec: unknown family {self.family!r}")
        self.amplitudes = np.asarray(self.amplitudes, float)

    def __call__(self, t):
        base = np.sin(self.omega * t)
        if self.family == "decay_sin":
            base = base * np.exp(-self.decay * t)
        return self.amplitudes * base


def benchmark_forcing(split: str, decay: float = 0.05) -> ForcingSpec:
    """Train: ``A sin 5t`` for 200 amplitudes. Validation/test: the smallest 50
    and largest 130 of the 180 decaying-forcing amplitudes."""
    if split == "train":
        return ForcingSpec("sin", TRAIN_AMPLITUDES)
    if split == "validation":
        return ForcingSpec("decay_sin", TEST_AMPLITUDES[:50], decay)
    if split == "test":
        return ForcingSpec("decay_sin", TEST_AMPLITUDES[50:], decay)
    raise ValueError(f"benchmark_forcing: unknown split {split!r}")


def gen_forced_system(system, forcing: ForcingSpec, split: str = "train", length: int = 2048,
                      dt: float = 0.01, substeps: int = 10) -> TrajectoryDataset:
    """One trajectory per forcing amplitude on ``t_k = k dt``; output is the first state."""
    grid = np.arange(length) * dt
    n = len(forcing.amplitudes)
    traj = rk4_integrate(lambda t, s: system.rhs(t, s, forcing(t)),
                         system.initial_state(n), grid, substeps)
    f = np.stack([forcing(t) for t in grid], axis=1)
    meta = {"system": system.kind, "split": split, "forcing": forcing.family,
            "decay": forcing.decay, "dt": dt, "substeps": substeps,
            "params": _params(system)}
    return TrajectoryDataset(f[..., None], traj[:, :, 0].T[..., None], grid,
                             forcing.amplitudes[:, None], meta)


def _params(system) -> str:
    return ",".join(f"{k}={v!r}" for k, v in vars(system).items() if k != "kind")


# ---------------------------------------------------------------------------
# Lorenz initial-value problem


def gen_lorenz_ivp(n: int, T: float = 1.0, seed: int = 0, cfg: LorenzIVP | None = None,
                   substeps: int = 10, split: str = "train",
                   y0: np.ndarray | None = None) -> TrajectoryDataset:
    """Random initial states mapped to ``x(t)`` on ``{0.001, ..., T}``.

    The input sequence repeats the initial state at every step and carries the
    time grid as a fourth channel. ``y0`` (``[n, 3]``) overrides sampling.
    """
    cfg = cfg or LorenzIVP()
    boxes = np.array([cfg.x_box, cfg.y_box, cfg.z_box])
    if y0 is not None:
        y0 = np.asarray(y0, float).reshape(n, 3)
    elif n:
        y0 = np.stack([sample_rng(seed, i).uniform(boxes[:, 0], boxes[:, 1]) for i in range(n)])
    else:
        y0 = np.zeros((0, 3))
    L = int(round(1000 * T))
    grid = np.arange(L + 1) / 1000.0
    traj = rk4_integrate(cfg.rhs, y0, grid, substeps)
    t = grid[1:]
    inputs = np.concatenate([np.repeat(y0[:, None, :], L, axis=1),
                             np.broadcast_to(t[None, :, None], (n, L, 1))], axis=-1)
    meta = {"system": "lorenz_ivp", "seed": seed, "split": split, "T": T, "substeps": substeps}
    return TrajectoryDataset(inputs, traj[1:, :, 0].T[..., None], t, y0, meta)


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([int(seed), 7919]).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


# ---------------------------------------------------------------------------
# Izhikevich spiking neuron


@dataclass
class PulseForcing:
    """Random rectangular current pulses (uniform ranges, time in ms)."""

    n_pulses: tuple = (1, 1)
    amplitude: tuple = (1.0, 5.0)
    onset: tuple = (5.0, 60.0)
    width: tuple = (1.0, 10.0)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        k = rng.integers(self.n_pulses[0], self.n_pulses[1] + 1)
        return np.array([[rng.uniform(*self.amplitude), rng.uniform(*self.onset),
                          rng.uniform(*self.width)] for _ in range(k)])


def pack_pulses(pulses: list[np.ndarray]) -> np.ndarray:
    """Stack ragged ``[k_i, 3]`` pulse lists into ``[n, max_k, 3]`` (zero-amplitude padding)."""
    k = max((len(p) for p in pulses), default=0)
    out = np.zeros((len(pulses), max(k, 1), 3))
    for i, p in enumerate(pulses):
        out[i, :len(p)] = p
    return out


def pulse_current(packed: np.ndarray, t: float, scale: float = 1.0) -> np.ndarray:
    """Total current of each sample's pulses at time ``t``."""
    on = (packed[..., 1] <= t) & (t < packed[..., 1] + packed[..., 2])
    return scale * (packed[..., 0] * on).sum(axis=-1)


def simulate_izhikevich(pulses: list[np.ndarray], cfg: Izhikevich, grid: np.ndarray,
                        substeps: int = 25, scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Integrate with resets. Returns ``(states [L, n, 2], spike_counts [n])``."""
    n = len(pulses)
    packed = pack_pulses(pulses)
    spikes = np.zeros(n, dtype=int)

    def reset(t, y_old, y_new):
        hit = y_new[:, 0] >= cfg.u_peak
        if hit.any():
            y_new = y_new.copy()
            y_new[hit, 0] = cfg.c
            y_new[hit, 1] += cfg.d
            spikes[hit] += 1
        return y_new

    y0 = np.tile([cfg.u_thres, cfg.b * cfg.u_thres], (n, 1))
    traj = rk4_integrate(lambda t, s: cfg.rhs(t, s, pulse_current(packed, t, scale)),
                         y0, grid, substeps, post_step=reset)
    return traj, spikes


def gen_izhikevich(n_train: int, n_test: int, seed: int = 0, cfg: Izhikevich | None = None,
                   T: float = 100.0, length: int = 401, forcing: PulseForcing | None = None,
                   substeps: int = 25) -> tuple[TrajectoryDataset, TrajectoryDataset]:
    """Pulse current ``I(t)`` mapped to ``u(t)`` on ``length`` points over ``[0, T]`` ms."""
    cfg = cfg or Izhikevich()
    forcing = forcing or PulseForcing()
    grid = np.linspace(0.0, T, length)
    out = []
    for split, count, offset in (("train", n_train, 0), ("test", n_test, n_train)):
        pulses = [forcing.sample(sample_rng(seed, offset + i)) for i in range(count)]
        traj, spikes = simulate_izhikevich(pulses, cfg, grid, substeps)
        packed = pack_pulses(pulses)
        I = np.stack([pulse_current(packed, t) for t in grid], axis=1) if count else np.zeros((0, length))
        meta = {"system": "izhikevich", "seed": seed, "split": split, "T": T,
                "substeps": substeps, "params": _params(cfg)}
        out.append(TrajectoryDataset(I[..., None], traj[:, :, 0].T[..., None], grid,
                                     spikes[:, None].astype(float), meta))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# PK-PD


def euler_propagators(pk: PKConstants, h: float, m: int) -> tuple[np.ndarray, np.ndarray]:
    """``(M^m, sum_{j<m} M^j h e1)`` for the explicit-Euler map ``M = I + hK``.

    Applying them advances ``m`` Euler steps under a constant central-compartment
    input rate, identical in exact arithmetic to stepping one at a time.
    """
    M = np.eye(2) + h * pk.matrix()
    P = np.eye(2)
    S = np.zeros(2)
    for _ in range(m):
        S = S + h * P[:, 0]
        P = M @ P
    return P, S


def pk_euler(rate: np.ndarray, pk: PKConstants, dt: float, h: float,
             A0: np.ndarray | None = None) -> np.ndarray:
    """Explicit-Euler PK amounts on a grid of step ``dt`` (hours).

    ``rate[..., k]`` is the infusion rate (mg/kg/h) held constant on
    ``[t_k, t_{k+1})``. Returns ``A [..., len, 2]`` including ``t_0``.
    """
    m = int(round(dt / h))
    if m < 1 or abs(m * h - dt) > 1e-9 * dt:
        raise ValueError("pk_euler: dt must be a whole number of Euler steps")
    P, S = euler_propagators(pk, h, m)
    rate = np.asarray(rate, float)
    A = np.zeros(rate.shape[:-1] + (2,)) if A0 is None else np.array(A0, float)
    out = np.empty(rate.shape[:-1] + (rate.shape[-1] + 1, 2))
    out[..., 0, :] = A
    for k in range(rate.shape[-1]):
        A = A @ P.T + rate[..., k, None] * S
        out[..., k + 1, :] = A
    return out


def pd_rhs(pd: PDConstants, k1, k2):
    def rhs(t, x, c):
        w = x.sum(axis=-1)
        growth = pd.lambda0 * x[..., 0] / (1 + (pd.lambda0 / pd.lambda1 * w) ** pd.psi) ** (1 / pd.psi)
        kill = k2 * c * x[..., 0]
        return np.stack([growth - kill, kill - k1 * x[..., 1],
                         k1 * (x[..., 1] - x[..., 2]), k1 * (x[..., 2] - x[..., 3])], axis=-1)
    return rhs


def pd_rk4(c_half: np.ndarray, pd: PDConstants, k1, k2, h: float) -> np.ndarray:
    """RK4 on the PD system with concentration sampled every ``h/2``.

    ``c_half[..., j]`` is the concentration at ``j h / 2``. Returns the states
    at every full step, ``[..., steps + 1, 4]``.
    """
    rhs = pd_rhs(pd, k1, k2)
    steps = (c_half.shape[-1] - 1) // 2
    x = np.zeros(c_half.shape[:-1] + (4,))
    x[..., 0] = pd.w0
    out = np.empty(c_half.shape[:-1] + (steps + 1, 4))
    out[..., 0, :] = x
    for i in range(steps):
        t = i * h
        c0, cm, c1 = c_half[..., 2 * i], c_half[..., 2 * i + 1], c_half[..., 2 * i + 2]
        a = rhs(t, x, c0)
        b = rhs(t + h / 2, x + h / 2 * a, cm)
        c = rhs(t + h / 2, x + h / 2 * b, cm)
        d = rhs(t + h, x + h * c, c1)
        x = x + h / 6 * (a + 2 * b + 2 * c + d)
        out[..., i + 1, :] = x
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("pd_rk4: non-finite PD state")
    return out


def sample_schedule(rng: np.random.Generator, sched: Schedule):
    dose = float(rng.choice(sched.doses))
    start = float(rng.choice(sched.start_days))
    interval = float(rng.choice(sched.intervals))
    return dose, start + interval * np.arange(sched.n_doses)


def sample_pd_params(rng: np.random.Generator, pd: PDConstants) -> tuple[float, float]:
    # negative draws are redrawn, i.e. the normals are truncated at zero
    k1 = rng.normal(pd.k1_mean, pd.k1_std)
    while k1 <= 0:
        k1 = rng.normal(pd.k1_mean, pd.k1_std)
    k2 = rng.normal(pd.k2_mean, pd.k2_std)
    while k2 <= 0:
        k2 = rng.normal(pd.k2_mean, pd.k2_std)
    return k1, k2


def dose_rate(doses: list[tuple[float, np.ndarray]], grid: np.ndarray, dt_hours: float) -> np.ndarray:
    """Each dose is delivered as a rate ``dose / dt`` over the grid step it falls in."""
    rate = np.zeros((len(doses), len(grid)))
    dt = grid[1] - grid[0]
    for i, (amount, times) in enumerate(doses):
        for t in times:
            k = int(round((t - grid[0]) / dt))
            if 0 <= k < len(grid) - 1:
                rate[i, k] += amount / dt_hours
    return rate


def gen_pkpd(n: int, seed: int = 0, cfg: PKPD | None = None, horizon: float = 35.0,
             dt: float = 0.1, pk_h: float = 1e-3, pd_h: float = 1e-3,
             split: str = "train", start: int = 0) -> TrajectoryDataset:
    """Dosing schedule and PD parameters mapped to tumour weight ``w(t)``.

    Time is in days on the output grid; PK runs in hours with explicit Euler
    at ``pk_h`` hours; PD runs RK4 at ``pd_h`` days. Concentration enters
    the PD equations in ng/mL (``1000 A1 / V1``).
    Inputs per step: ``(I1 [mg/kg/h], k1, k2, t)``; static coefficients
    ``(k1, k2, dose, first day, interval)``.
    """
    cfg = cfg or PKPD()
    L = int(round(horizon / dt)) + 1
    grid = np.arange(L) * dt
    rngs = [sample_rng(seed, start + i) for i in range(n)]
    schedules = [sample_schedule(r, cfg.schedule) for r in rngs]
    params = np.array([sample_pd_params(r, cfg.pd) for r in rngs]).reshape(n, 2)
    rate = dose_rate(schedules, grid, dt * 24.0)
    # concentration at every half PD step
    half = pd_h / 2
    per_grid = int(round(dt / half))
    lattice_rate = np.repeat(rate[:, :-1], per_grid, axis=1)
    A = pk_euler(lattice_rate, cfg.pk, half * 24.0, pk_h)
    conc = 1000.0 * A[..., 0] / cfg.pk.V1
    k1, k2 = params[:, 0], params[:, 1]
    x = pd_rk4(conc, cfg.pd, k1, k2, pd_h)
    stride = int(round(dt / pd_h))
    w = x[:, ::stride].sum(axis=-1)
    inputs = np.stack([rate, np.repeat(k1[:, None], L, 1), np.repeat(k2[:, None], L, 1),
                       np.broadcast_to(grid, (n, L))], axis=-1)
    coeffs = np.array([[p[0], p[1], s[0], s[1][0], (s[1][1] - s[1][0]) if len(s[1]) > 1 else 0.0]
                       for p, s in zip(params, schedules)]).reshape(n, 5)
    meta = {"system": "pkpd", "seed": seed, "split": split, "horizon_days": horizon,
            "dt_days": dt, "pk_h_hours": pk_h, "pd_h_days": pd_h}
    return TrajectoryDataset(inputs, w[..., None], grid, coeffs, meta)


def gen_pk(n: int, seed: int = 0, pk: PKConstants | None = None, sched: Schedule | None = None,
           horizon: float = 35.0, dt: float = 0.25, h: float = 1e-3, split: str = "train",
           start: int = 0) -> TrajectoryDataset:
    """PK-only trajectories in hours: dosing rate mapped to ``(A1, A2)``.

    The schedule space is read in hours (start hour, interval in hours) so the
    compartment dynamics are resolved by the output grid.
    """
    pk = pk or PKConstants()
    sched = sched or Schedule()
    L = int(round(horizon / dt)) + 1
    grid = np.arange(L) * dt
    schedules = [sample_schedule(sample_rng(seed, start + i, 1), sched) for i in range(n)]
    rate = dose_rate(schedules, grid, dt)
    A = pk_euler(rate[:, :-1], pk, dt, h)
    inputs = np.stack([rate, np.broadcast_to(grid, (n, L))], axis=-1)
    coeffs = np.array([[s[0], s[1][0], (s[1][1] - s[1][0]) if len(s[1]) > 1 else 0.0]
                       for s in schedules]).reshape(n, 3)
    meta = {"system": "pk", "seed": seed, "split": split, "horizon_hours": horizon,
            "dt_hours": dt, "euler_h_hours": h}
    return TrajectoryDataset(inputs, A, grid, coeffs, meta)
