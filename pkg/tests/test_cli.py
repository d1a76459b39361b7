import os
import subprocess
import sys
import time

import numpy as np
import pytest

from ssop import cli
from ssop.dataset import read_dataset
from ssop.train import RunMetrics

SMOKE = """
[system]
kind = pendulum
n_train = 12
n_test = 6
length_scale = 0.2
seed = 3

[model]
kind = gru
hidden = 4

[train]
epochs = 50
batch_size = 6
lr = 0.005

[protocol]
name = interpolation

[run]
seeds = 0
"""


def write_cfg(tmp_path, text=SMOKE, name="smoke.cfg", **replace):
    for old, new in replace.items():
        text = text.replace(old.replace("__", " = "), new)
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(*args):
    return cli.main([str(a) for a in args])


def read_rows(path):
    lines = open(path).read().splitlines()
    assert lines[0] == "model\tsplit\tmetric\tvalue\tseed"
    return [l.split("\t") for l in lines[1:]]


def test_config_values_are_typed():
    cfg = cli.parse_config_text(SMOKE)
    assert cfg.system["n_train"] == 12 and cfg.system["length_scale"] == 0.2
    assert cfg.model.kind == "gru" and cfg.model.options == {"hidden": 4}
    assert cfg.train.lr == 0.005 and cfg.seeds == [0]


@pytest.mark.parametrize("edit, message", [
    (("name = interpolation", "name = magic"), "unknown protocol"),
    (("kind = gru", "kind = cnn"), "unknown model"),
    (("hidden = 4", "depth = 4"), "unknown options"),
    (("name = interpolation", "name = pkpd-physics"), "needs system kind pk"),
    (("lr = 0.005", "lr = -1"), "lr"),
    (("[run]", "[extras]"), "unknown sections"),
])
def test_invalid_configs_exit_one(tmp_path, capsys, edit, message):
    path = tmp_path / "bad.cfg"
    path.write_text(SMOKE.replace(*edit))
    assert run("gen", path, "--out", tmp_path / "r") == 1
    assert message in capsys.readouterr().err


def test_fixed_length_model_rejected_for_longer_horizons(tmp_path, capsys):
    path = tmp_path / "bad.cfg"
    path.write_text(SMOKE.replace("name = interpolation", "name = length-extrapolation")
                    .replace("kind = gru", "kind = fno").replace("hidden = 4", "width = 2"))
    assert run("train", path, "--out", tmp_path / "r") == 1
    assert "fixed-length" in capsys.readouterr().err


def test_usage_errors_exit_one():
    with pytest.raises(SystemExit) as exc:
        cli.main([])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--seeds", "a,b"])
    assert exc.value.code == 1
    assert run("train") == 1


def test_missing_config_file_exits_three(tmp_path):
    assert run("gen", tmp_path / "nope.cfg") == 3


def test_gen_writes_datasets_and_manifest(tmp_path):
    cfg, out = write_cfg(tmp_path), tmp_path / "run"
    assert run("gen", cfg, "--out", out) == 0
    tr, te = read_dataset(str(out / "data" / "train.ssop")), read_dataset(str(out / "data" / "test.ssop"))
    assert (len(tr), len(te), tr.length) == (12, 6, 100)
    manifest = (out / "manifest.txt").read_text()
    assert "config_hash=" in manifest and "seed=3" in manifest and "dataset.train=" in manifest


def test_gen_refuses_overwrite_without_force(tmp_path):
    cfg, out = write_cfg(tmp_path), tmp_path / "run"
    assert run("gen", cfg, "--out", out) == 0
    assert run("gen", cfg, "--out", out) == 2
    assert run("gen", cfg, "--out", out, "--force") == 0


def test_manifest_hash_tracks_every_field(tmp_path):
    hashes = set()
    variants = [{}, {"lr__0.005": "lr = 0.004"}, {"hidden__4": "hidden = 5"}, {"seeds__0": "seeds = 1"},
                {"n_test__6": "n_test = 7"}]
    for i, rep in enumerate(variants):
        cfg = cli.load_config(write_cfg(tmp_path, name=f"c{i}.cfg", **rep))
        hashes.add(cfg.config_hash())
    assert len(hashes) == len(variants)


def test_train_without_datasets_exits_three(tmp_path):
    assert run("train", write_cfg(tmp_path), "--out", tmp_path / "empty") == 3


def test_smoke_train_writes_all_artifacts(tmp_path):
    cfg, out = write_cfg(tmp_path), tmp_path / "run"
    run("gen", cfg, "--out", out)
    t0 = time.perf_counter()
    assert run("train", cfg, "--out", out) == 0
    assert time.perf_counter() - t0 < 60
    assert (out / "checkpoints" / "main_seed0.npz").exists()
    loss = (out / "curves" / "loss_main_seed0.tsv").read_text().splitlines()
    assert loss[0] == "epoch\tloss" and len(loss) == 51
    rows = read_rows(out / "metrics.tsv")
    assert ["gru", "test", "rel_l2"] in [r[:3] for r in rows]


def test_two_seeds_give_rows_plus_mean_std(tmp_path):
    cfg, out = write_cfg(tmp_path, **{"epochs__50": "epochs = 3"}), tmp_path / "run"
    run("gen", cfg, "--out", out)
    assert run("train", cfg, "--out", out, "--seed", "1,2") == 0
    rel = [r for r in read_rows(out / "metrics.tsv") if r[1:3] == ["test", "rel_l2"]]
    assert [r[4] for r in rel] == ["1", "2", "mean", "std"]
    vals = [float(r[3]) for r in rel[:2]]
    assert float(rel[2][3]) == pytest.approx(np.mean(vals))
    assert float(rel[3][3]) == pytest.approx(np.std(vals))


def test_interrupted_checkpoint_write_leaves_no_partial_file(tmp_path, monkeypatch):
    cfg, out = write_cfg(tmp_path, **{"epochs__50": "epochs = 2"}), tmp_path / "run"
    run("gen", cfg, "--out", out)
    assert run("train", cfg, "--out", out) == 0
    ckpt = out / "checkpoints" / "main_seed0.npz"
    before = ckpt.read_bytes()

    def interrupted(src, dst):
        raise KeyboardInterrupt

    monkeypatch.setattr(os, "replace", interrupted)
    with pytest.raises(KeyboardInterrupt):
        run("train", cfg, "--out", out, "--force", "--seed", "0")
    assert ckpt.read_bytes() == before
    assert not [f for f in os.listdir(out / "checkpoints") if f.startswith(".tmp-")]


def test_checkpoint_round_trip(tmp_path):
    cfg, out = write_cfg(tmp_path, **{"epochs__50": "epochs = 2"}), tmp_path / "run"
    run("gen", cfg, "--out", out)
    run("train", cfg, "--out", out)
    model = cli.load_checkpoint(str(out / "checkpoints" / "main_seed0.npz"))
    te = read_dataset(str(out / "data" / "test.ssop"))
    rows = read_rows(out / "metrics.tsv")
    mse = next(float(r[3]) for r in rows if r[1:3] == ["test", "mse"] and r[4] == "0")
    from ssop.train import eval_interpolation
    assert eval_interpolation(model, te).test_mse == mse


def test_divergence_exits_four_and_keeps_metrics(tmp_path, monkeypatch):
    cfg, out = write_cfg(tmp_path, **{"epochs__50": "epochs = 2"}), tmp_path / "run"
    run("gen", cfg, "--out", out)
    real = cli.train

    def diverging(*a, **kw):
        m = real(*a, **kw)
        m.outcome = "Diverge"
        return m

    monkeypatch.setattr(cli, "train", diverging)
    assert run("train", cfg, "--out", out) == 4
    rows = read_rows(out / "metrics.tsv")
    assert ["gru", "test", "rel_l2", "Diverge", "0"] in rows


def test_eval_length_extrapolation_rows(tmp_path):
    text = SMOKE.replace("name = interpolation", "name = length-extrapolation\nhorizons = 1,2")
    cfg, out = write_cfg(tmp_path, text, **{"epochs__50": "epochs = 2"}), tmp_path / "run"
    run("gen", cfg, "--out", out)
    run("train", cfg, "--out", out)
    assert run("eval", cfg, "--out", out) == 0
    rows = [r for r in read_rows(out / "eval.tsv") if r[4] == "0"]
    assert [r[1] for r in rows] == ["test_T1", "test_T2"]
    curve = (out / "curves" / "rel_l2_gru_seed0.tsv").read_text().splitlines()
    assert curve[0] == "t\trel_l2" and len(curve) == 101


def test_eval_ex_sweep_table(tmp_path):
    text = SMOKE.replace("name = interpolation", "name = ex-sweep")
    cfg, out = write_cfg(tmp_path, text, **{"epochs__50": "epochs = 1"}), tmp_path / "run"
    run("gen", cfg, "--out", out)
    run("train", cfg, "--out", out)
    assert run("eval", cfg, "--out", out) == 0
    table = (out / "ex_table.txt").read_text().splitlines()
    assert table[0].split() == ["Model", "Metric", "0.1", "0.2", "0.3", "0.4", "0.5", "0.6",
                                "0.7", "0.8", "0.9", "1"]
    assert [l.split()[1] for l in table[1:]] == ["Mean", "Std"]


def test_sweep_with_workers_matches_sequential(tmp_path, monkeypatch):
    text = SMOKE.replace("seeds = 0", "seeds = 0,1")
    cfg = write_cfg(tmp_path, text, **{"epochs__50": "epochs = 2"})
    monkeypatch.setenv("SSOP_THREADS", "1")
    assert run("sweep", cfg, "--out", tmp_path / "a") == 0
    monkeypatch.setenv("SSOP_THREADS", "2")
    assert run("sweep", cfg, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.tsv").read_bytes() == (tmp_path / "b" / "metrics.tsv").read_bytes()
    assert (tmp_path / "a" / "eval.tsv").exists()


def test_long_time_budget_marks_na(tmp_path):
    text = SMOKE.replace("name = interpolation", "name = long-time\nlengths = 50,100") \
                .replace("kind = gru", "kind = transformer").replace("hidden = 4", "d = 4\nheads = 1\nffn = 4")
    cfg, out = write_cfg(tmp_path, text, **{"epochs__50": "epochs = 1"}), tmp_path / "run"
    run("gen", cfg, "--out", out)
    assert run("train", cfg, "--out", out, "--budget-mem-mb", "0") == 0
    rows = read_rows(out / "metrics.tsv")
    assert all(r[3] == "N.A." for r in rows if r[4] == "0")
    assert run("eval", cfg, "--out", out) == 0
    assert all(r[3] == "N.A." for r in read_rows(out / "eval.tsv") if r[4] == "0")


def two_runs(tmp_path):
    dirs = []
    for name, hidden in (("small", 2), ("big", 6)):
        text = SMOKE.replace("hidden = 4", f"hidden = {hidden}\nname = gru{hidden}")
        cfg, out = write_cfg(tmp_path, text, name=f"{name}.cfg", **{"epochs__50": "epochs = 5"}), tmp_path / name
        run("gen", cfg, "--out", out)
        run("train", cfg, "--out", out)
        run("eval", cfg, "--out", out)
        dirs.append(out)
    return dirs


def test_report_single_run(tmp_path):
    out = two_runs(tmp_path)[0]
    assert run("report", out, "--out", tmp_path / "rep") == 0
    lines = (tmp_path / "rep" / "report.txt").read_text().splitlines()
    assert lines[0].startswith("model") and len(lines) == 3     # header, one row, legend
    assert (tmp_path / "rep" / "curves.tsv").read_text().startswith("run\tcurve\tt\trel_l2")


def test_report_ranks_ascending_and_is_byte_stable(tmp_path):
    dirs = two_runs(tmp_path)
    assert run("report", *dirs, "--out", tmp_path / "r1") == 0
    assert run("report", *dirs, "--out", tmp_path / "r2") == 0
    for f in ("report.csv", "report.txt", "curves.tsv"):
        assert (tmp_path / "r1" / f).read_bytes() == (tmp_path / "r2" / f).read_bytes()
    rows = [l.split(",") for l in (tmp_path / "r1" / "report.csv").read_text().splitlines()[1:]]
    col = {r[0]: (float(r[3]), r[6]) for r in rows if r[1:3] == ["test", "rel_l2"]}
    best = min(col, key=lambda m: col[m][0])
    assert col[best][1] == "1" and {v[1] for v in col.values()} == {"1", "2"}
    assert "(1)" in (tmp_path / "r1" / "report.txt").read_text()


def test_report_rejects_incompatible_metric_sets(tmp_path, capsys):
    dirs = two_runs(tmp_path)
    m = dirs[1] / "metrics.tsv"
    m.write_text("".join(l for l in m.read_text().splitlines(True) if "\ttrain\t" not in l))
    assert run("report", *dirs, "--out", tmp_path / "rep") == 1
    assert "incompatible metric sets" in capsys.readouterr().err


def test_report_requires_completed_run(tmp_path):
    assert run("report", tmp_path, "--out", tmp_path / "rep") == 3


def test_rerun_is_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path, **{"epochs__50": "epochs = 3"})
    for out in (tmp_path / "a", tmp_path / "b"):
        run("gen", cfg, "--out", out)
        run("train", cfg, "--out", out)
    for rel in ("data/train.ssop", "data/test.ssop", "manifest.txt", "curves/loss_main_seed0.tsv",
                "metrics.tsv", "checkpoints/main_seed0.npz"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "ssop", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("gen", "train", "eval", "sweep", "report"):
        assert sub in res.stdout


CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


@pytest.mark.parametrize("name", sorted(os.listdir(CONFIG_DIR)))
def test_shipped_configs_parse(name):
    cfg = cli.load_config(os.path.join(CONFIG_DIR, name))
    assert cfg.out.startswith("runs/")
    assert cli.cells(cfg)
