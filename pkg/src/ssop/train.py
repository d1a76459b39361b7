"""Losses, metrics, Adam with linear decay, the training loop and model factory."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import baselines as bl
from .autodiff import Tensor
from .dataset import TrajectoryDataset
from .layers import Module
from .ssm import MambaBlockConfig, MambaModel
from .systems import PKConstants


class Divergence(ArithmeticError):
    """Non-finite loss or gradient; the run stops and is reported as ``Diverge``."""


# ---------------------------------------------------------------------------
# losses and metrics


def mse_loss(pred, target) -> Tensor:
    pred = ad._lift(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    return ad.mean(ad.square(pred - target))


def mse(pred, target) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shape mismatch {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def relative_l2(pred, target, per_sample: bool = True):
    """Relative L2 error of ``[N, L, C]`` predictions.

    ``per_sample=True``: ``||pred_i - target_i|| / ||target_i||`` over time and
    channels, averaged over samples (a scalar). ``per_sample=False``: the
    ratio at each time step taken across all samples and channels (a curve of
    length ``L``). Time steps where the target vanishes identically are NaN in
    the curve; a target that is zero everywhere is an error.
    """
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"relative_l2: shape mismatch {pred.shape} vs {target.shape}")
    if target.ndim == 2:
        pred, target = pred[..., None], target[..., None]
    if target.ndim != 3:
        raise ValueError("relative_l2: expected [N, L] or [N, L, C] arrays")
    if per_sample:
        den = np.sqrt(np.sum(target ** 2, axis=(1, 2)))
        if np.any(den == 0):
            raise ValueError("relative_l2: a target sample has zero norm")
        num = np.sqrt(np.sum((pred - target) ** 2, axis=(1, 2)))
        return float(np.mean(num / den))
    den = np.sqrt(np.sum(target ** 2, axis=(0, 2)))
    if not np.any(den > 0):
        raise ValueError("relative_l2: target has zero norm at every time step")
    num = np.sqrt(np.sum((pred - target) ** 2, axis=(0, 2)))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), np.nan)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamConfig:
    lr: float = 1e-3
    total_steps: int | None = None     # None keeps lr constant
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def lr_at(self, t: int) -> float:
        if self.total_steps is None:
            return self.lr
        return self.lr * max(0.0, 1.0 - t / self.total_steps)


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros(cls, params) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params],
                   [np.zeros(p.data.shape) for p in params])


def adam_step(params, grads, state: AdamState, t: int, cfg: AdamConfig) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Complex parameters use ``|g|^2`` for the second moment; with the gradient
    convention of the autodiff engine the step is steepest descent in the
    real and imaginary parts alike. Non-finite gradients raise
    :class:`Divergence` before anything is modified.
    """
    if t < 1:
        raise ValueError("adam_step: t must be >= 1")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise Divergence("non-finite gradient")
    lr = cfg.lr_at(t)
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * np.conj(g)).real
        if lr > 0:
            p.data = p.data - lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + cfg.eps)
    state.t = t
    return state


# ---------------------------------------------------------------------------
# physics residual for the two-compartment PK model


def central_difference_matrix(grid) -> np.ndarray:
    """``D`` with ``(D f)_k`` the central difference of ``f`` at ``t_k``,
    one-sided at the two ends. Exact on affine functions."""
    grid = np.asarray(grid, float)
    L = len(grid)
    if L < 2:
        raise ValueError("central differences need at least two grid points")
    d = np.diff(grid)
    if not np.allclose(d, d[0], rtol=1e-9, atol=1e-12) or d[0] <= 0:
        raise ValueError("central differences need a uniform increasing grid")
    h = d[0]
    D = np.zeros((L, L))
    D[0, :2] = [-1 / h, 1 / h]
    D[-1, -2:] = [-1 / h, 1 / h]
    for k in range(1, L - 1):
        D[k, k - 1], D[k, k + 1] = -0.5 / h, 0.5 / h
    return D


def window_rate(rate: np.ndarray) -> np.ndarray:
    """Dosing rate averaged over the stencil of each difference.

    ``rate[..., k]`` holds on ``[t_k, t_{k+1})``; the central stencil at
    ``t_k`` spans two such intervals, the one-sided ones a single interval.
    """
    out = np.empty_like(rate)
    out[..., 1:-1] = 0.5 * (rate[..., :-2] + rate[..., 1:-1])
    out[..., 0] = rate[..., 0]
    out[..., -1] = rate[..., -2]
    return out


def physics_residual_pk(pred, inputs, grid, pk: PKConstants | None = None,
                        rate_channel: int = 0) -> Tensor:
    """Mean squared residual of ``A' = K A + r e1`` on predicted amounts.

    ``pred`` is ``[B, L, 2]`` (central and peripheral amounts), ``inputs`` the
    matching ``[B, L, C]`` model inputs whose ``rate_channel`` is the dosing
    rate. Time derivatives use :func:`central_difference_matrix`.
    """
    pk = pk or PKConstants()
    pred = ad._lift(pred)
    inputs = inputs.data if isinstance(inputs, Tensor) else np.asarray(inputs, float)
    if pred.ndim != 3 or pred.shape[-1] != 2:
        raise ValueError("physics_residual_pk: predictions must be [B, L, 2]")
    D = central_difference_matrix(grid)
    if D.shape[0] != pred.shape[1]:
        raise ValueError("physics_residual_pk: grid length does not match predictions")
    dA = ad.einsum("tl,blc->btc", D, pred)
    # K A plus the windowed source, with the source sitting on the same stencil as dA
    KA = ad.einsum("blc,dc->bld", pred, pk.matrix())
    src = np.zeros(pred.shape)
    src[..., 0] = window_rate(inputs[..., rate_channel])
    KA_on_stencil = ad.einsum("tl,blc->btc", _stencil_average(pred.shape[1]), KA)
    return ad.mean(ad.square(dA - KA_on_stencil - src))


def _stencil_average(L: int) -> np.ndarray:
    """Averages ``K A`` over the same points the difference stencil touches.

    Central: ``(f_{k-1} + 2 f_k + f_{k+1}) / 4``; one-sided: the interval
    midpoint. This keeps the residual of the exact solution at ``O(h^2)``
    including the end points.
    """
    S = np.zeros((L, L))
    S[0, :2] = 0.5
    S[-1, -2:] = 0.5
    for k in range(1, L - 1):
        S[k, k - 1:k + 2] = [0.25, 0.5, 0.25]
    return S


# ---------------------------------------------------------------------------
# model factory


_DEFAULTS = {
    "mamba": dict(d_model=16, d_inner=32, d_state=16, conv_width=4, n_blocks=1, dt_rank=None),
    "gru": dict(hidden=32, n_layers=1),
    "lstm": dict(hidden=32, n_layers=1),
    "transformer": dict(d=40, heads=4, ffn=40, n_layers=1),
    "galerkin": dict(d=40, heads=4, ffn=40, n_layers=1),
    "deeponet": dict(width=24, depth=5, p=24),
    "fno": dict(width=16, modes=8, n_layers=4),
    "lno": dict(width=8, modes=4, head_width=128),
}


@dataclass
class ModelSpec:
    """Model family plus hyper-parameters; :meth:`build` instantiates it."""

    kind: str
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _DEFAULTS:
            raise ValueError(f"ModelSpec: unknown model {self.kind!r}; choose from {sorted(_DEFAULTS)}")
        unknown = set(self.options) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"ModelSpec: unknown options for {self.kind}: {sorted(unknown)}")

    def resolved(self) -> dict:
        return {**_DEFAULTS[self.kind], **self.options}

    @property
    def variable_length(self) -> bool:
        return self.kind not in ("deeponet", "fno", "lno")

    def build(self, in_dim: int, out_dim: int, grid, seed: int) -> Module:
        o = self.resolved()
        rng = np.random.default_rng([int(seed), 7])
        k = self.kind
        if k == "mamba":
            cfg = MambaBlockConfig(d_model=o["d_model"], d_inner=o["d_inner"], d_state=o["d_state"],
                                   conv_width=o["conv_width"], dt_rank=o["dt_rank"])
            return MambaModel(in_dim, out_dim, cfg, o["n_blocks"], rng)
        if k in ("gru", "lstm"):
            return bl.RNN(in_dim, out_dim, o["hidden"], rng, cell=k, n_layers=o["n_layers"])
        if k in ("transformer", "galerkin"):
            kind = "softmax" if k == "transformer" else "galerkin"
            return bl.TransformerModel(in_dim, out_dim, o["d"], o["heads"], o["ffn"],
                                       o["n_layers"], rng, kind)
        if k == "deeponet":
            return bl.DeepONet(len(grid), in_dim, grid, rng, width=o["width"], depth=o["depth"],
                               p=o["p"], out_dim=out_dim)
        if k == "fno":
            return bl.FNO(in_dim, out_dim, o["width"], o["modes"], o["n_layers"], rng)
        return bl.LNO(in_dim, out_dim, o["width"], o["modes"], grid, rng, head_width=o["head_width"])


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    schedule: str = "linear"          # "linear" decays to zero, "constant" does not
    seed: int = 0
    loss: str = "mse"
    physics_weight: float = 0.0
    data_weight: float = 1.0

    def validate(self) -> None:
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError("TrainConfig: lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("TrainConfig: batch_size must be >= 1 and epochs >= 0")
        if self.schedule not in ("linear", "constant"):
            raise ValueError(f"TrainConfig: unknown schedule {self.schedule!r}")
        if self.loss != "mse":
            raise ValueError(f"TrainConfig: unsupported loss {self.loss!r}")
        if self.physics_weight < 0 or self.data_weight < 0:
            raise ValueError("TrainConfig: loss weights must be >= 0")


@dataclass
class RunMetrics:
    train_loss: list = field(default_factory=list)   # per epoch, sample-weighted mean
    test_mse: float = math.nan
    test_rel_l2: float = math.nan
    wall_time: float = 0.0
    n_params: int = 0
    rel_l2_curve: np.ndarray | None = None
    outcome: str = "ok"                              # "ok" or "Diverge"
    extra: dict = field(default_factory=dict)
    model: Module | None = field(default=None, repr=False, compare=False)

    @property
    def diverged(self) -> bool:
        return self.outcome == "Diverge"


def predict(model: Module, inputs: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Forward pass without graph recording, in batches."""
    outs = []
    with ad.no_grad():
        for s in range(0, len(inputs), batch_size):
            outs.append(np.real(model(Tensor(inputs[s:s + batch_size])).data))
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))


def train(model_or_spec, dataset: TrajectoryDataset, cfg: TrainConfig,
          test: TrajectoryDataset | None = None, unlabeled: TrajectoryDataset | None = None,
          physics=None, callback=None) -> RunMetrics:
    """Minibatch Adam on the MSE loss, reshuffled every epoch with ``cfg.seed``.

    ``physics(pred, inputs, grid) -> Tensor`` adds ``cfg.physics_weight`` times
    a residual loss evaluated on the model's predictions for ``unlabeled``
    (a full pass over it at every step; without ``unlabeled`` the labeled
    batch is used). A non-finite loss or gradient stops training with outcome
    ``"Diverge"``; the losses recorded up to that point are kept.
    """
    cfg.validate()
    if cfg.data_weight == 0 and not (physics is not None and cfg.physics_weight > 0):
        raise ValueError("train: both loss terms have zero weight")
    if isinstance(model_or_spec, ModelSpec):
        model = model_or_spec.build(dataset.inputs.shape[-1], dataset.outputs.shape[-1],
                                    dataset.grid, cfg.seed)
    else:
        model = model_or_spec
    params = model.parameters()
    n = len(dataset)
    if n == 0:
        raise ValueError("train: empty dataset")
    steps_per_epoch = -(-n // cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = AdamConfig(lr=cfg.lr, total_steps=total if cfg.schedule == "linear" else None)
    state = AdamState.zeros(params)
    rng = np.random.default_rng([int(cfg.seed), 11])
    use_physics = physics is not None and cfg.physics_weight > 0
    X, Y = dataset.inputs, dataset.outputs
    m = RunMetrics(n_params=model.num_params(), model=model)
    t0 = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(n)
            acc = 0.0
            for s in range(0, n, cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                loss = Tensor(0.0)
                if cfg.data_weight > 0:
                    loss = cfg.data_weight * mse_loss(model(Tensor(X[idx])), Y[idx])
                if use_physics:
                    px = unlabeled.inputs if unlabeled is not None else X[idx]
                    loss = loss + cfg.physics_weight * physics(model(Tensor(px)), px, dataset.grid)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise Divergence(f"non-finite loss at epoch {epoch + 1}")
                grads = ad.grad(loss, params)
                step += 1
                adam_step(params, grads, state, step, opt)
                acc += value * len(idx)
            m.train_loss.append(acc / n)
            if callback is not None:
                callback(epoch, m.train_loss[-1], model)
    except Divergence as exc:
        m.outcome = "Diverge"
        m.extra["divergence"] = str(exc)
    m.wall_time = time.perf_counter() - t0
    m.extra["steps"] = step
    if test is not None and not m.diverged:
        ev = eval_interpolation(model, test)
        m.test_mse, m.test_rel_l2, m.rel_l2_curve = ev.test_mse, ev.test_rel_l2, ev.rel_l2_curve
    return m


def eval_interpolation(model: Module, test: TrajectoryDataset, batch_size: int = 256) -> RunMetrics:
    pred = predict(model, test.inputs, batch_size)
    if not np.all(np.isfinite(pred)):
        return RunMetrics(outcome="Diverge", n_params=model.num_params(), model=model)
    return RunMetrics(test_mse=mse(pred, test.outputs),
                      test_rel_l2=relative_l2(pred, test.outputs),
                      rel_l2_curve=relative_l2(pred, test.outputs, per_sample=False),
                      n_params=model.num_params(), model=model)
