"""Learn the antiderivative operator u -> s with s' = u, comparing a few models.

Run: python demos/02_operator_learning.py [--epochs 60]

Short budgets keep this under a couple of minutes; the accuracy gap between
models widens with more epochs (try --epochs 300).
"""
import argparse

from ssop import systems as S
from ssop.train import ModelSpec, TrainConfig, train

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=60)
ap.add_argument("--n-train", type=int, default=200)
args = ap.parse_args()

# Inputs are Gaussian random fields on 100 sensors in (0, 1]; outputs come
# from a fourth-order Runge-Kutta solve of s' = u.
train_ds = S.gen_deeponet_suite("antiderivative", args.n_train, length_scale=0.2, seed=0)
test_ds = S.gen_deeponet_suite("antiderivative", 100, length_scale=0.2, seed=1, split="test")
print(f"train {train_ds.inputs.shape} -> {train_ds.outputs.shape}")

specs = {
    "Mamba": ModelSpec("mamba", dict(d_inner=16, d_state=4)),
    "GRU": ModelSpec("gru", dict(hidden=16)),
    "DeepONet": ModelSpec("deeponet", dict(width=24, depth=3, p=24)),
    "FNO": ModelSpec("fno", dict(width=8, modes=8, n_layers=2)),
}
cfg = TrainConfig(epochs=args.epochs, batch_size=32, lr=5e-3, seed=0)

print(f"{'model':10s} {'params':>7s} {'test MSE':>10s} {'rel L2':>10s} {'time':>6s}")
for name, spec in specs.items():
    m = train(spec, train_ds, cfg, test=test_ds)
    print(f"{name:10s} {m.n_params:7d} {m.test_mse:10.3e} {m.test_rel_l2:10.3e} {m.wall_time:5.1f}s")
