"""Experiment runner: ``ssop gen | train | eval | sweep | report``.

A run is described by a config of flat ``key = value`` sections::

    [system]      kind plus generator parameters (n_train, n_test, seed, ...)
    [model]       kind plus hyper-parameters, optional ``name``
    [train]       epochs, batch_size, lr, schedule, physics_weight
    [protocol]    name plus protocol parameters (horizons, lengths, sizes, ...)
    [run]         seeds, out

Everything a command writes lands under the run directory (``[run] out`` or
``--out``) through temp-file-and-rename. Exit codes: 0 success, 1 usage or
invalid config, 2 refusing to overwrite, 3 missing input, 4 a run diverged
(partial metrics are still written).
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import math
import multiprocessing as mp
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import protocols as pr
from . import systems as sy
from .dataset import DatasetFormatError, atomic_write_bytes, read_dataset, write_dataset
from .train import (ModelSpec, RunMetrics, TrainConfig, eval_interpolation, predict,
                    relative_l2, train)

EXIT_OK, EXIT_USAGE, EXIT_EXISTS, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3, 4

PROTOCOLS = ("interpolation", "length-extrapolation", "ex-sweep", "long-time",
             "pkpd-limited-data", "pkpd-schedule-ext", "pkpd-physics")
SUITE_KINDS = ("antiderivative", "nonlinear", "pendulum")
FORCED_KINDS = ("duffing", "driven_pendulum", "lorenz")
METRIC_COLUMNS = ("model", "split", "metric", "value", "seed")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# configuration


def _value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("none", "null", ""):
        return None
    if low in ("true", "false"):
        return low == "true"
    if "," in t:
        return [_value(p) for p in t.split(",") if p.strip()]
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def _as_list(v) -> list:
    return v if isinstance(v, list) else [v]


@dataclass
class ExperimentConfig:
    system: dict
    model: ModelSpec
    model_name: str
    train: TrainConfig
    protocol: dict
    seeds: list = field(default_factory=lambda: [0])
    out: str = "run"
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def protocol_name(self) -> str:
        return self.protocol["name"]

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def parse_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise CliError(f"config: {exc}") from None
    raw = {s: {k: _value(v) for k, v in cp[s].items()} for s in cp.sections()}
    known = {"system", "model", "train", "protocol", "run"}
    extra = set(raw) - known
    if extra:
        raise CliError(f"config: unknown sections {sorted(extra)}")
    for s in ("system", "model"):
        if "kind" not in raw.get(s, {}):
            raise CliError(f"config: [{s}] needs a kind")
    system = dict(raw["system"])
    model_opts = dict(raw["model"])
    kind = model_opts.pop("kind")
    name = str(model_opts.pop("name", kind))
    try:
        spec = ModelSpec(kind, model_opts)
        tr = TrainConfig(**raw.get("train", {}))
        tr.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(f"config: {exc}") from None
    protocol = dict(raw.get("protocol", {}))
    protocol.setdefault("name", "interpolation")
    run = raw.get("run", {})
    cfg = ExperimentConfig(system, spec, name, tr, protocol,
                           [int(s) for s in _as_list(run.get("seeds", 0))],
                           str(run.get("out", "run")), raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    p, k = cfg.protocol_name, cfg.system["kind"]
    if p not in PROTOCOLS:
        raise CliError(f"config: unknown protocol {p!r}; choose from {list(PROTOCOLS)}")
    if p in ("length-extrapolation", "ex-sweep") and k not in SUITE_KINDS:
        raise CliError(f"config: protocol {p} needs a system in {list(SUITE_KINDS)}")
    if p == "length-extrapolation" and not cfg.model.variable_length:
        raise CliError(f"config: {cfg.model.kind} is fixed-length and cannot run {p}")
    if p == "long-time" and k not in FORCED_KINDS + SUITE_KINDS:
        raise CliError(f"config: protocol {p} needs a forced or suite system")
    if p in ("pkpd-limited-data", "pkpd-schedule-ext") and k != "pkpd":
        raise CliError(f"config: protocol {p} needs system kind pkpd")
    if p == "pkpd-physics" and k != "pk":
        raise CliError(f"config: protocol {p} needs system kind pk")
    if k not in SUITE_KINDS + FORCED_KINDS + ("izhikevich", "lorenz_ivp", "pk", "pkpd"):
        raise CliError(f"config: no generator for system {k!r}")


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}", EXIT_MISSING) from None
    return parse_config_text(text)


# ---------------------------------------------------------------------------
# dataset generation


def _sys_get(s: dict, key: str, default):
    return s.get(key, default)


def generate(cfg: ExperimentConfig) -> dict:
    """All datasets the protocol needs, keyed by file stem."""
    s, p = cfg.system, cfg.protocol
    kind, seed = s["kind"], int(s.get("seed", 0))
    n_train, n_test = int(s.get("n_train", 100)), int(s.get("n_test", 50))
    name = cfg.protocol_name
    if kind in SUITE_KINDS:
        l = float(s.get("length_scale", 0.2))
        T = float(s.get("T", 1.0))
        gen = lambda n, sd, ls=l, T=T, split="train": sy.gen_deeponet_suite(
            kind, n, ls, seed=sd, T=T, split=split)
        if name == "long-time":
            return _long_time_sets(cfg, lambda L, n, sd, split: gen(n, sd, T=L / 100, split=split))
        out = {"train": gen(n_train, seed)}
        if name == "length-extrapolation":
            for h in _as_list(p.get("horizons", list(pr.HORIZONS))):
                out[f"test_T{h:g}"] = gen(n_test, seed + 1, T=T * h, split=f"test_T{h:g}")
        elif name == "ex-sweep":
            for lt in _as_list(p.get("l_test", list(pr.EX_LENGTH_SCALES))):
                out[f"test_l{lt:g}"] = gen(n_test, seed + 1, ls=float(lt), split=f"test_l{lt:g}")
        else:
            out["test"] = gen(n_test, seed + 1, split="test")
        return out
    if kind in FORCED_KINDS:
        system = sy.make_system(kind)
        dt, substeps = float(s.get("dt", 0.01)), int(s.get("substeps", 10))
        length = int(s.get("length", 2048))

        def forced(L, split):
            return sy.gen_forced_system(system, sy.benchmark_forcing(split), split, L, dt, substeps)
        if name == "long-time":
            return _long_time_sets(cfg, lambda L, n, sd, split: forced(L, split))
        return {"train": forced(length, "train"), "validation": forced(length, "validation"),
                "test": forced(length, "test")}
    if kind == "izhikevich":
        tr, te = sy.gen_izhikevich(n_train, n_test, seed=seed)
        return {"train": tr, "test": te}
    if kind == "lorenz_ivp":
        ds = sy.gen_lorenz_ivp(n_train + n_test, T=float(s.get("T", 1.0)), seed=seed)
        fit, held = sy.split_indices(len(ds), n_test / (n_train + n_test), seed)
        return {"train": ds.subset(fit, "train"), "test": ds.subset(held, "test")}
    if kind == "pk":
        kw = {k: float(s[k]) for k in ("horizon", "dt") if k in s}
        lab, unl, te = pr.gen_pk_physics_split(seed, int(s.get("n_labeled", 5)),
                                               int(s.get("n_unlabeled", 45)), n_test, **kw)
        scale = float(s.get("amount_scale", 45.0))
        return {"labeled": pr.scale_pk(lab, scale), "unlabeled": pr.scale_pk(unl, scale),
                "test": pr.scale_pk(te, scale)}
    # pkpd
    kw = {k: float(s[k]) for k in ("horizon", "dt", "pd_h", "pk_h") if k in s}
    out = {"train": sy.gen_pkpd(n_train, seed=seed, start=0, **kw),
           "test": sy.gen_pkpd(n_test, seed=seed, split="test", start=n_train, **kw)}
    if name == "pkpd-schedule-ext":
        out.update(pr.schedule_ext_test_sets(n_test, seed + 1, **kw))
    return out


def _long_time_sets(cfg, make) -> dict:
    s = cfg.system
    seed, n_train, n_test = int(s.get("seed", 0)), int(s.get("n_train", 100)), int(s.get("n_test", 50))
    out = {}
    for L in _as_list(cfg.protocol.get("lengths", [2048])):
        out[f"train_L{L}"] = make(int(L), n_train, seed, "train")
        out[f"test_L{L}"] = make(int(L), n_test, seed + 1, "test")
    return out


def cmd_gen(cfg: ExperimentConfig, out: str, force: bool) -> int:
    sets = generate(cfg)
    data_dir = os.path.join(out, "data")
    paths = {k: os.path.join(data_dir, f"{k}.ssop") for k in sets}
    manifest = os.path.join(out, "manifest.txt")
    existing = [p for p in list(paths.values()) + [manifest] if os.path.exists(p)]
    if existing and not force:
        raise CliError(f"refusing to overwrite {len(existing)} existing file(s), e.g. "
                       f"{existing[0]}; pass --force", EXIT_EXISTS)
    lines = [f"config_hash={cfg.config_hash()}", f"seed={cfg.system.get('seed', 0)}",
             f"system={cfg.system['kind']}", f"protocol={cfg.protocol_name}"]
    for k in sorted(sets):
        write_dataset(sets[k], paths[k])
        with open(paths[k], "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        lines.append(f"dataset.{k}={k}.ssop sha256={digest} n={len(sets[k])} L={sets[k].length}")
    atomic_write_bytes(manifest, ("\n".join(lines) + "\n").encode("utf-8"))
    print(f"wrote {len(sets)} dataset(s) and manifest to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# training


def load_set(out: str, name: str):
    path = os.path.join(out, "data", f"{name}.ssop")
    if not os.path.exists(path):
        raise CliError(f"missing dataset {path}; run `ssop gen` first", EXIT_MISSING)
    try:
        return read_dataset(path)
    except DatasetFormatError as exc:
        raise CliError(f"unreadable dataset {path}: {exc}", EXIT_MISSING) from None


def cells(cfg: ExperimentConfig) -> list[str]:
    p = cfg.protocol
    if cfg.protocol_name == "long-time":
        return [f"L{int(L)}" for L in sorted(_as_list(p.get("lengths", [2048])))]
    if cfg.protocol_name == "pkpd-limited-data":
        return [f"n{int(n)}" for n in _as_list(p.get("sizes", [125, 250, 500]))]
    if cfg.protocol_name == "pkpd-physics":
        return [str(m) for m in _as_list(p.get("modes", ["data", "hybrid"]))]
    return ["main"]


def _label(cfg: ExperimentConfig, cell: str) -> str:
    return cfg.model_name if cell == "main" else f"{cfg.model_name}/{cell}"


def save_checkpoint(path: str, model, spec: ModelSpec, dims: tuple, grid) -> None:
    buf = io.BytesIO()
    arrays = {f"p:{k}": v for k, v in model.state_dict().items()}
    meta = json.dumps({"kind": spec.kind, "options": spec.options, "dims": list(dims)}, sort_keys=True)
    np.savez(buf, __meta__=np.array(meta), __grid__=np.asarray(grid, float), **arrays)
    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: str):
    if not os.path.exists(path):
        raise CliError(f"missing checkpoint {path}; run `ssop train` first", EXIT_MISSING)
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        grid = z["__grid__"]
        state = {k[2:]: z[k] for k in z.files if k.startswith("p:")}
    spec = ModelSpec(meta["kind"], meta["options"])
    model = spec.build(meta["dims"][0], meta["dims"][1], grid, 0)
    model.load_state_dict(state)
    return model


def _fmt(v) -> str:
    return v if isinstance(v, str) else repr(float(v))


def _tsv(rows, header) -> bytes:
    lines = ["\t".join(header)] + ["\t".join(_fmt(c) if not isinstance(c, int) or isinstance(c, bool)
                                              else str(c) for c in r) for r in rows]
    return ("\n".join(lines) + "\n").encode("utf-8")


def run_cell(cfg: ExperimentConfig, out: str, cell: str, seed: int, budget=None) -> dict:
    """Train one (cell, seed); write checkpoint and loss curve; return metric rows."""
    name = cfg.protocol_name
    c = TrainConfig(**{**asdict(cfg.train), "seed": seed})
    label = _label(cfg, cell)
    unlabeled = physics = None
    if name == "long-time":
        tr, te = load_set(out, f"train_{cell}"), load_set(out, f"test_{cell}")
    elif name == "pkpd-physics":
        tr, unlabeled, te = load_set(out, "labeled"), load_set(out, "unlabeled"), load_set(out, "test")
        physics = pr.pk_physics_loss()
        w = c.physics_weight or 1.0
        c.physics_weight, c.data_weight = {"data": (0.0, 1.0), "hybrid": (w, 1.0),
                                           "physics": (w, 0.0)}[cell]
    else:
        tr, te = load_set(out, "train"), load_set(out, _iid_test(cfg))
        if name == "pkpd-limited-data":
            n = int(cell[1:])
            if n > len(tr):
                raise CliError(f"size {n} exceeds the {len(tr)} training samples")
            tr = tr.subset(np.arange(n))
            if "sample_epochs" in cfg.protocol:
                c.epochs = max(1, int(cfg.protocol["sample_epochs"]) // n)
    rows, extra = [], {}
    if budget is not None:
        model = cfg.model.build(tr.inputs.shape[-1], tr.outputs.shape[-1], tr.grid, seed)
        x, y = tr.inputs[:c.batch_size], tr.outputs[:c.batch_size]
        extra["step_time_s"] = pr.time_fwd_bwd(model, x, y)
        extra["peak_mb"] = pr.peak_alloc_mb(model, x, y)
        est = extra["step_time_s"] * c.epochs * -(-len(tr) // c.batch_size)
        if est > budget.seconds or extra["peak_mb"] > budget.mem_mb:
            return {"rows": [(label, "test", m, "N.A.", seed) for m in ("rel_l2", "mse")],
                    "diverged": False, "timing": []}
    m = train(cfg.model, tr, c, test=te, unlabeled=unlabeled, physics=physics)
    ckpt = os.path.join(out, "checkpoints", f"{cell}_seed{seed}.npz")
    save_checkpoint(ckpt, m.model, cfg.model, (tr.inputs.shape[-1], tr.outputs.shape[-1]), tr.grid)
    loss_rows = [(e + 1, v) for e, v in enumerate(m.train_loss)]
    atomic_write_bytes(os.path.join(out, "curves", f"loss_{cell}_seed{seed}.tsv"),
                       _tsv(loss_rows, ("epoch", "loss")))
    if m.diverged:
        rows += [(label, "test", "rel_l2", "Diverge", seed), (label, "test", "mse", "Diverge", seed)]
    else:
        rows += [(label, "test", "rel_l2", m.test_rel_l2, seed), (label, "test", "mse", m.test_mse, seed)]
        rows.append((label, "train", "mse", m.train_loss[-1] if m.train_loss else math.nan, seed))
    timing = [(label, "train", "wall_time_s", m.wall_time, seed),
              (label, "train", "n_params", float(m.n_params), seed)]
    timing += [(label, "train", k, v, seed) for k, v in extra.items()]
    return {"rows": rows, "diverged": m.diverged, "timing": timing}


def _summary_rows(rows) -> list:
    """Mean/std rows over seeds for every (model, split, metric) with numeric values."""
    groups: dict = {}
    for model, split, metric, value, seed in rows:
        groups.setdefault((model, split, metric), []).append(value)
    out = []
    for key in sorted(groups):
        vals = [v for v in groups[key] if not isinstance(v, str)]
        if len(vals) == len(groups[key]) and vals:
            out.append(key + (float(np.mean(vals)), "mean"))
            out.append(key + (float(np.std(vals)), "std"))
        else:
            mark = "Diverge" if "Diverge" in groups[key] else "N.A."
            out += [key + (mark, "mean"), key + (mark, "std")]
    return out


def _write_metrics(out: str, fname: str, rows: list) -> None:
    rows = sorted(rows, key=lambda r: (r[0], r[1], r[2], r[4]))
    rows = rows + _summary_rows(rows)
    atomic_write_bytes(os.path.join(out, fname), _tsv(rows, METRIC_COLUMNS))


def _guard(out: str, names: list, force: bool) -> None:
    existing = [n for n in names if os.path.exists(os.path.join(out, n))]
    if existing and not force:
        raise CliError(f"refusing to overwrite {os.path.join(out, existing[0])}; pass --force",
                       EXIT_EXISTS)


def _jobs(cfg, seeds):
    return [(cell, seed) for cell in cells(cfg) for seed in seeds]


def cmd_train(cfg: ExperimentConfig, out: str, seeds: list, force: bool, budget=None,
              workers: int = 1) -> int:
    _guard(out, ["metrics.tsv"], force)
    for name in _required_sets(cfg):
        load_set(out, name)
    jobs = _jobs(cfg, seeds)
    results = _map(cfg, out, jobs, budget if cfg.protocol_name == "long-time" else None, workers)
    rows = [r for res in results for r in res["rows"]]
    _write_metrics(out, "metrics.tsv", rows)
    atomic_write_bytes(os.path.join(out, "timing.tsv"),
                       _tsv([r for res in results for r in res["timing"]], METRIC_COLUMNS))
    diverged = any(res["diverged"] for res in results)
    print(f"trained {len(jobs)} run(s); metrics in {os.path.join(out, 'metrics.tsv')}")
    if diverged:
        print("error: at least one run diverged (recorded as Diverge)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _required_sets(cfg) -> list:
    if cfg.protocol_name == "long-time":
        return [f"{s}_{c}" for c in cells(cfg) for s in ("train", "test")]
    if cfg.protocol_name == "pkpd-physics":
        return ["labeled", "unlabeled", "test"]
    return ["train", _iid_test(cfg)]


def _iid_test(cfg) -> str:
    """The test set drawn from the training distribution."""
    if cfg.protocol_name == "length-extrapolation":
        return f"test_T{min(_as_list(cfg.protocol.get('horizons', list(pr.HORIZONS)))):g}"
    if cfg.protocol_name == "ex-sweep":
        return f"test_l{float(cfg.system.get('length_scale', 0.2)):g}"
    return "test"


def _worker(args):
    cfg, out, cell, seed, budget = args
    return run_cell(cfg, out, cell, seed, budget)


def _map(cfg, out, jobs, budget, workers):
    args = [(cfg, out, cell, seed, budget) for cell, seed in jobs]
    if workers <= 1 or len(args) <= 1:
        return [_worker(a) for a in args]
    with mp.get_context("fork").Pool(min(workers, len(args))) as pool:
        return pool.map(_worker, args)


# ---------------------------------------------------------------------------
# evaluation


def evaluate_protocol(cfg: ExperimentConfig, out: str, seeds: list) -> tuple[list, dict]:
    """Protocol metrics for every trained checkpoint plus per-time curves."""
    name = cfg.protocol_name
    rows, curves = [], {}
    for cell, seed in _jobs(cfg, seeds):
        label = _label(cfg, cell)
        path = os.path.join(out, "checkpoints", f"{cell}_seed{seed}.npz")
        if name == "long-time" and not os.path.exists(path):
            rows.append((label, f"test_{cell}", "rel_l2", "N.A.", seed))
            continue
        model = load_checkpoint(path)
        if name == "length-extrapolation":
            suites = {}
            for h in _as_list(cfg.protocol.get("horizons", list(pr.HORIZONS))):
                suites[float(h)] = load_set(out, f"test_T{h:g}")
            for r in pr.eval_length_extrapolation(model, suites):
                rows.append((label, f"test_T{r['T']:g}", "rel_l2", r["rel_l2"], seed))
            test = suites[min(suites)]
        elif name == "ex-sweep":
            l_train = float(cfg.system.get("length_scale", 0.2))
            sets = {float(lt): load_set(out, f"test_l{lt:g}")
                    for lt in _as_list(cfg.protocol.get("l_test", list(pr.EX_LENGTH_SCALES)))}
            for lt, v in pr.eval_ex_sweep(model, l_train, sets).items():
                rows.append((label, f"l_test={lt:g}", "rel_l2", v, seed))
            test = sets[min(sets, key=lambda v: abs(v - l_train))]
        elif name == "pkpd-schedule-ext":
            tr = load_set(out, "train")
            rows.append((label, "train", "rel_l2", relative_l2(predict(model, tr.inputs), tr.outputs), seed))
            for t in ("test1", "test2", "test3"):
                rows.append((label, t, "rel_l2", eval_interpolation(model, load_set(out, t)).test_rel_l2, seed))
            test = load_set(out, "test")
        else:
            test = load_set(out, f"test_{cell}" if name == "long-time" else "test")
            ev = eval_interpolation(model, test)
            split = f"test_{cell}" if name == "long-time" else "test"
            rows += [(label, split, "rel_l2", ev.test_rel_l2, seed), (label, split, "mse", ev.test_mse, seed)]
        curve = eval_interpolation(model, test).rel_l2_curve
        curves[(label, seed)] = (test.grid, curve)
    return rows, curves


def _write_curves(out: str, curves: dict) -> None:
    for (label, seed), (grid, curve) in sorted(curves.items()):
        fname = f"rel_l2_{label.replace('/', '_')}_seed{seed}.tsv"
        atomic_write_bytes(os.path.join(out, "curves", fname),
                           _tsv(list(zip(grid.tolist(), curve.tolist())), ("t", "rel_l2")))


def cmd_eval(cfg: ExperimentConfig, out: str, seeds: list, force: bool) -> int:
    _guard(out, ["eval.tsv"], force)
    rows, curves = evaluate_protocol(cfg, out, seeds)
    _write_metrics(out, "eval.tsv", rows)
    _write_curves(out, curves)
    if cfg.protocol_name == "ex-sweep":
        res = {}
        for model, split, _, v, seed in rows:
            res.setdefault(model, {}).setdefault(seed, {})[float(split.split("=")[1])] = v
        scales = sorted({float(r[1].split("=")[1]) for r in rows})
        table = pr.ex_table({m: list(per.values()) for m, per in res.items()}, scales)
        atomic_write_bytes(os.path.join(out, "ex_table.txt"), _aligned(table).encode("utf-8"))
    print(f"evaluated {len(curves)} checkpoint(s); metrics in {os.path.join(out, 'eval.tsv')}")
    return EXIT_OK


def cmd_sweep(cfg, out, seeds, force, budget, workers) -> int:
    """Generate if needed, then train every (cell, seed) on worker processes and evaluate."""
    if not os.path.exists(os.path.join(out, "manifest.txt")):
        cmd_gen(cfg, out, force)
    code = cmd_train(cfg, out, seeds, force, budget, workers)
    cmd_eval(cfg, out, seeds, True)
    return code


# ---------------------------------------------------------------------------
# reports


def read_metrics(path: str) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(lines[0].split("\t")) != METRIC_COLUMNS:
        raise CliError(f"{path}: not a metrics table", EXIT_MISSING)
    rows = []
    for line in lines[1:]:
        model, split, metric, value, seed = line.split("\t")
        if seed in ("mean", "std"):
            continue
        try:
            v = float(value)
        except ValueError:
            v = value
        rows.append((model, split, metric, v, seed))
    return rows


def _aligned(table: list) -> str:
    widths = [max(len(str(r[i])) for r in table) for i in range(len(table[0]))]
    return "\n".join("  ".join(str(c).ljust(w) for c, w in zip(r, widths)).rstrip()
                     for r in table) + "\n"


MARKS = {0: " (1)", 1: " (2)", 2: " (3)"}


def build_report(run_dirs: list) -> tuple[list, list, dict]:
    runs = []
    for d in run_dirs:
        files = [os.path.join(d, f) for f in ("metrics.tsv", "eval.tsv") if os.path.exists(os.path.join(d, f))]
        if not files:
            raise CliError(f"{d}: no metrics.tsv or eval.tsv; is it a completed run?", EXIT_MISSING)
        rows = [r for f in files for r in read_metrics(f)]
        runs.append((d, rows))
    colsets = [sorted({(r[1], r[2]) for r in rows}) for _, rows in runs]
    for (d, _), cs in zip(runs[1:], colsets[1:]):
        if cs != colsets[0]:
            missing = sorted(set(colsets[0]) - set(cs))
            added = sorted(set(cs) - set(colsets[0]))
            raise CliError(f"incompatible metric sets: {d} lacks {missing} and adds {added} "
                           f"relative to {runs[0][0]}")
    columns = colsets[0]
    homes: dict = {}
    for d, rows in runs:
        for r in rows:
            homes.setdefault(r[0], set()).add(d)
    cells_: dict = {}
    for d, rows in runs:
        for model, split, metric, v, seed in rows:
            # the same model name in several runs gets the run directory appended
            label = model if len(homes[model]) == 1 else f"{model} ({os.path.basename(os.path.normpath(d))})"
            cells_.setdefault(label, {}).setdefault((split, metric), []).append(v)
    models = sorted(cells_)
    stats = {}
    for m in models:
        for col in columns:
            vals = cells_[m].get(col, [])
            nums = [v for v in vals if not isinstance(v, str)]
            if vals and len(nums) == len(vals):
                stats[(m, col)] = (float(np.mean(nums)), float(np.std(nums)), len(nums))
            else:
                stats[(m, col)] = (next((v for v in vals if isinstance(v, str)), "N.A."), "", len(vals))
    ranks = {}
    for col in columns:
        ordered = sorted((stats[(m, col)][0], m) for m in models if not isinstance(stats[(m, col)][0], str))
        for i, (_, m) in enumerate(ordered[:3]):
            ranks[(m, col)] = i
    csv_rows = [("model", "split", "metric", "mean", "std", "n", "rank")]
    text = [["model"] + [f"{s}:{k}" for s, k in columns]]
    for m in models:
        line = [m]
        for col in columns:
            mean, std, n = stats[(m, col)]
            r = ranks.get((m, col))
            csv_rows.append((m, col[0], col[1], _fmt(mean), "" if std == "" else _fmt(std), str(n),
                             "" if r is None else str(r + 1)))
            cell = mean if isinstance(mean, str) else f"{mean:.3E}"
            if not isinstance(mean, str) and n > 1:
                cell += f"+-{std:.3E}"
            line.append(cell + MARKS.get(r, ""))
        text.append(line)
    curves = {}
    for d, _ in runs:
        cdir = os.path.join(d, "curves")
        if os.path.isdir(cdir):
            for f in sorted(os.listdir(cdir)):
                if f.startswith("rel_l2_"):
                    with open(os.path.join(cdir, f), encoding="utf-8") as fh:
                        body = fh.read().splitlines()[1:]
                    curves[(os.path.basename(os.path.normpath(d)), f[7:-4])] = body
    return csv_rows, text, curves


def cmd_report(run_dirs: list, out: str) -> int:
    csv_rows, text, curves = build_report(run_dirs)
    atomic_write_bytes(os.path.join(out, "report.csv"),
                       ("\n".join(",".join(r) for r in csv_rows) + "\n").encode("utf-8"))
    legend = "ranking per column by ascending value: (1) best, (2) second, (3) third\n"
    atomic_write_bytes(os.path.join(out, "report.txt"), (_aligned(text) + legend).encode("utf-8"))
    lines = ["run\tcurve\tt\trel_l2"]
    for (run, name), body in sorted(curves.items()):
        lines += [f"{run}\t{name}\t{row}" for row in body]
    atomic_write_bytes(os.path.join(out, "curves.tsv"), ("\n".join(lines) + "\n").encode("utf-8"))
    print(_aligned(text) + legend, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ssop", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, help_ in (("gen", "generate datasets and a manifest"),
                        ("train", "train every (cell, seed); write checkpoints, loss curves, metrics"),
                        ("eval", "evaluate checkpoints under the configured protocol"),
                        ("sweep", "gen if needed, then train on worker processes and evaluate")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config_path", nargs="?", help="experiment config (same as --config)")
        sp.add_argument("--config", dest="config_opt")
        sp.add_argument("--out", help="run directory (overrides [run] out)")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
        sp.add_argument("--seed", "--seeds", dest="seeds", type=_seed_list,
                        help="comma-separated seeds (overrides [run] seeds)")
        sp.add_argument("--budget-seconds", type=float, default=600.0)
        sp.add_argument("--budget-mem-mb", type=float, default=4096.0)
    rp = sub.add_parser("report", help="aggregate completed runs into comparison tables")
    rp.add_argument("run_dirs", nargs="+")
    rp.add_argument("--out", required=True, help="directory for report.csv, report.txt, curves.tsv")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dirs, args.out)
        path = args.config_opt or args.config_path
        if not path:
            raise CliError(f"{args.command}: a config file is required")
        cfg = load_config(path)
        out = args.out or cfg.out
        seeds = args.seeds or cfg.seeds
        budget = pr.Budget(args.budget_seconds, args.budget_mem_mb)
        workers = max(1, int(os.environ.get("SSOP_THREADS", "1") or 1))
        if args.command == "gen":
            if args.seeds:
                cfg.system["seed"] = args.seeds[0]
                cfg.raw.setdefault("system", {})["seed"] = args.seeds[0]
            return cmd_gen(cfg, out, args.force)
        if args.command == "train":
            return cmd_train(cfg, out, seeds, args.force, budget, workers)
        if args.command == "eval":
            return cmd_eval(cfg, out, seeds, args.force)
        return cmd_sweep(cfg, out, seeds, args.force, budget, workers)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
