"""Evaluation protocols: interpolation, longer horizons, smoothness shift,
long sequences and the pharmacology studies."""
from __future__ import annotations

import gc
import math
import time
import tracemalloc
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dataset import TrajectoryDataset
from .layers import Module
from .systems import (PKPD, PKConstants, Schedule, gen_deeponet_suite, gen_pk, gen_pkpd,
                      split_indices)
from .train import (ModelSpec, RunMetrics, TrainConfig, eval_interpolation, mse_loss,
                    physics_residual_pk, predict, relative_l2, train)

HORIZONS = (1, 2, 3, 4)
EX_LENGTH_SCALES = tuple(round(0.1 * k, 1) for k in range(1, 11))


class CapabilityError(ValueError):
    """The model cannot run the requested protocol (e.g. fixed-length operators)."""


def holdout(ds: TrajectoryDataset, fraction: float = 0.2, seed: int = 0):
    """Model-selection split: ``1 - fraction`` for fitting, ``fraction`` for validation."""
    fit, val = split_indices(len(ds), fraction, seed)
    return ds.subset(fit, "train"), ds.subset(val, "validation")


# ---------------------------------------------------------------------------
# longer horizons


def length_suites(kind: str, n: int, seed: int, horizons=HORIZONS,
                  length_scale: float = 0.2) -> dict:
    """Test suites on ``[0, T]`` for each horizon, same step as the ``[0, 1]`` data."""
    return {T: gen_deeponet_suite(kind, n, length_scale, seed=seed, T=T, split=f"test_T{T}")
            for T in horizons}


def eval_length_extrapolation(model: Module, suites: dict) -> list[dict]:
    """Relative L2 and MSE per horizon, one row per suite in ascending ``T``."""
    if not getattr(model, "variable_length", True):
        raise CapabilityError(f"{type(model).__name__} is tied to its training length; "
                              "longer horizons need a sequence model")
    rows = []
    for T in sorted(suites):
        ev = eval_interpolation(model, suites[T])
        rows.append({"T": T, "rel_l2": ev.test_rel_l2, "mse": ev.test_mse})
    return rows


# ---------------------------------------------------------------------------
# smoothness shift (Ex+ / Ex-)


def ex_test_sets(kind: str, n: int, seed: int, scales=EX_LENGTH_SCALES) -> dict:
    """One test set per input length scale. The seed is shared across scales,
    so the set at ``l_train`` is exactly the in-distribution test set."""
    return {l: gen_deeponet_suite(kind, n, l, seed=seed, split=f"test_l{l}") for l in scales}


def eval_ex_sweep(model: Module, l_train: float, test_sets: dict) -> dict:
    """``{l_test: relative L2}`` for every test length scale, ascending."""
    if not any(math.isclose(l, l_train) for l in test_sets):
        raise ValueError(f"eval_ex_sweep: no test set at l_train={l_train}")
    return {l: eval_interpolation(model, test_sets[l]).test_rel_l2 for l in sorted(test_sets)}


def ex_table(results: dict, scales=EX_LENGTH_SCALES) -> list[list[str]]:
    """Rows ``[model, Mean|Std, v(0.1), ..., v(1.0)]`` from ``{model: [sweep per seed]}``."""
    rows = [["Model", "Metric"] + [f"{l:g}" for l in scales]]
    for name in results:
        runs = results[name]
        vals = np.array([[r[l] for l in scales] for r in runs])
        rows.append([name, "Mean"] + [f"{v:.3E}" for v in vals.mean(axis=0)])
        rows.append([name, "Std"] + [f"{v:.3E}" for v in vals.std(axis=0)])
    return rows


# ---------------------------------------------------------------------------
# long sequences


@dataclass
class Budget:
    seconds: float = 60.0
    mem_mb: float = 2048.0


def fwd_bwd(model: Module, x: np.ndarray, y: np.ndarray) -> None:
    loss = mse_loss(model(Tensor(x)), y)
    ad.grad(loss, model.parameters())


def time_fwd_bwd(model: Module, x: np.ndarray, y: np.ndarray, reps: int = 1) -> float:
    best = math.inf
    for _ in range(reps):
        t0 = time.perf_counter()
        fwd_bwd(model, x, y)
        best = min(best, time.perf_counter() - t0)
    return best


def peak_alloc_mb(model: Module, x: np.ndarray, y: np.ndarray) -> float:
    """Peak traced allocation of one forward+backward pass, in MiB.

    This is a resident-allocation estimate from the Python allocator tracer,
    not a device query."""
    gc.collect()
    tracemalloc.start()
    try:
        fwd_bwd(model, x, y)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return peak / 2 ** 20


def _growth(spec: ModelSpec) -> int:
    return 2 if spec.kind == "transformer" else 1


def eval_long_time(specs: dict, lengths, budget: Budget | None = None, batch: int = 1,
                   data: dict | None = None, train_cfg: TrainConfig | None = None,
                   seed: int = 0, reps: int = 1) -> list[dict]:
    """Wall time, traced peak memory and (optionally) accuracy per (model, length).

    Lengths are visited in ascending order. Before running a cell, time and
    memory are extrapolated from the model's previous cell (quadratically for
    softmax attention, linearly otherwise); a cell predicted to exceed the
    budget is reported as ``"N.A."`` and skipped along with every longer one.
    ``data`` maps a length to ``(train, test)`` datasets; with ``train_cfg``
    the model is trained on them and its test relative L2 reported.
    """
    budget = budget or Budget()
    rows = []
    rng = np.random.default_rng([seed, 5])
    for name, spec in specs.items():
        prev = None
        over = False
        for L in sorted(lengths):
            row = {"model": name, "length": L, "time_s": "N.A.", "peak_mb": "N.A.", "rel_l2": "N.A."}
            if prev is not None and not over:
                scale = (L / prev[0]) ** _growth(spec)
                over = prev[1] * scale > budget.seconds or prev[2] * scale > budget.mem_mb
            if over:
                rows.append(row)
                continue
            if data is not None:
                tr, te = data[L]
                x, y = tr.inputs[:batch], tr.outputs[:batch]
                in_dim, out_dim, grid = tr.inputs.shape[-1], tr.outputs.shape[-1], tr.grid
            else:
                x, y = rng.standard_normal((batch, L, 1)), rng.standard_normal((batch, L, 1))
                in_dim, out_dim, grid = 1, 1, np.arange(L) / L
            model = spec.build(in_dim, out_dim, grid, seed)
            t = time_fwd_bwd(model, x, y, reps)
            mem = peak_alloc_mb(model, x, y)
            row.update(time_s=t, peak_mb=mem)
            if data is not None and train_cfg is not None:
                m = train(model, tr, train_cfg, test=te)
                row["rel_l2"] = "Diverge" if m.diverged else m.test_rel_l2
            rows.append(row)
            prev = (L, t, mem)
    return rows


# ---------------------------------------------------------------------------
# pharmacology studies


def scale_pk(ds: TrajectoryDataset, amount_scale: float = 45.0) -> TrajectoryDataset:
    """Divide dosing rate and amounts by ``amount_scale`` and time by the horizon.

    The compartment equations are linear, so the scaled rate and amounts obey
    the same equations with the same constants."""
    x = ds.inputs.copy()
    x[..., 0] /= amount_scale
    x[..., 1] /= ds.grid[-1]
    meta = dict(ds.meta, amount_scale=amount_scale)
    return TrajectoryDataset(x, ds.outputs / amount_scale, ds.grid, ds.coeffs, meta)


def pk_physics_loss(pk: PKConstants | None = None):
    pk = pk or PKConstants()
    return lambda pred, inputs, grid: physics_residual_pk(pred, inputs, grid, pk)


def pkpd_physics(spec: ModelSpec, labeled, unlabeled, test, cfg: TrainConfig,
                 modes=("data", "hybrid"), pk: PKConstants | None = None) -> dict:
    """Train on labeled data only, data plus physics on ``unlabeled``, or
    physics alone; returns ``{mode: RunMetrics}``."""
    out = {}
    phys = pk_physics_loss(pk)
    for mode in modes:
        if mode == "data":
            c = replace(cfg, physics_weight=0.0, data_weight=1.0)
        elif mode == "hybrid":
            c = replace(cfg, physics_weight=cfg.physics_weight or 1.0, data_weight=1.0)
        elif mode == "physics":
            c = replace(cfg, physics_weight=cfg.physics_weight or 1.0, data_weight=0.0)
        else:
            raise ValueError(f"pkpd_physics: unknown mode {mode!r}")
        out[mode] = train(spec, labeled, c, test=test, unlabeled=unlabeled, physics=phys)
    return out


def pkpd_limited_data(spec: ModelSpec, train_ds, test, sizes, cfg: TrainConfig,
                      sample_epochs: int | None = None) -> dict:
    """Train on the first ``n`` samples for each ``n`` in ``sizes``.

    With ``sample_epochs`` the epoch count is ``sample_epochs // n`` so the
    number of sample visits stays fixed across sizes."""
    out = {}
    for n in sizes:
        if n > len(train_ds):
            raise ValueError(f"pkpd_limited_data: {n} samples requested, {len(train_ds)} available")
        c = cfg if sample_epochs is None else replace(cfg, epochs=max(1, sample_epochs // n))
        sub = train_ds.subset(np.arange(n))
        m = train(spec, sub, c, test=test)
        if not m.diverged:
            m.extra["train_rel_l2"] = relative_l2(predict(m.model, sub.inputs), sub.outputs)
        out[n] = m
    return out


SCHEDULE_SHIFTS = {
    # intervals and first days both outside the training ranges, two doses
    "test1": Schedule(start_days=(14, 15, 16), intervals=(7, 8), n_doses=2),
    # late first day, training intervals
    "test2": Schedule(start_days=(17, 18, 19, 20), intervals=(2, 3, 4, 5, 6)),
    # just past the training first days, three doses inside the horizon
    "test3": Schedule(start_days=(14, 15, 16), intervals=(2, 3, 4, 5, 6)),
}


def schedule_ext_test_sets(n: int, seed: int, base: PKPD | None = None, **gen_kw) -> dict:
    base = base or PKPD()
    return {name: gen_pkpd(n, seed=seed, cfg=replace(base, schedule=s), split=name, **gen_kw)
            for name, s in SCHEDULE_SHIFTS.items()}


def pkpd_schedule_ext(spec: ModelSpec, train_ds, test_sets: dict, cfg: TrainConfig) -> dict:
    """Train once, then relative L2 on the training set and each shifted set."""
    m = train(spec, train_ds, cfg)
    if m.diverged:
        return {"train": "Diverge", **{k: "Diverge" for k in test_sets}}
    out = {"train": relative_l2(predict(m.model, train_ds.inputs), train_ds.outputs)}
    for name, ds in test_sets.items():
        out[name] = eval_interpolation(m.model, ds).test_rel_l2
    return out


def gen_pk_physics_split(seed: int, n_labeled: int = 5, n_unlabeled: int = 45, n_test: int = 50,
                         **gen_kw):
    """Labeled, unlabeled and test PK sets drawn from disjoint sample indices."""
    lab = gen_pk(n_labeled, seed=seed, split="labeled", start=0, **gen_kw)
    unl = gen_pk(n_unlabeled, seed=seed, split="unlabeled", start=n_labeled, **gen_kw)
    te = gen_pk(n_test, seed=seed, split="test", start=n_labeled + n_unlabeled, **gen_kw)
    return lab, unl, te
