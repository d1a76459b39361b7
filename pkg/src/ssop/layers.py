"""Parameter containers and the small dense layers shared by every model."""
from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def param(data) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True)


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Kaiming-style uniform init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return param(rng.uniform(-bound, bound, size=shape))


class Module:
    """Attribute-walking parameter registry.

    Parameters are tensors with ``requires_grad`` stored as attributes, in
    lists/tuples of such tensors, or inside child modules. Iteration order is
    attribute insertion order, so checkpoints and optimizer state line up
    across runs.
    """

    #: whether the model accepts sequences of a length it was not built for
    variable_length = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(f"{prefix}{name}", value)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_params(self, complex_weight: int = 2) -> int:
        """Trainable real degrees of freedom.

        A complex entry counts as two by default; ``complex_weight=1`` counts
        array elements instead, the convention of frameworks that report
        ``numel``.
        """
        return int(sum(p.size * (complex_weight if p.is_complex else 1) for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"state {k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def _walk(name: str, value) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(f"{name}.{i}", v)


class Linear(Module):
    """``y = x W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_fan_in(rng, (n_in, n_out), n_in)
        self.bias = uniform_fan_in(rng, (n_out,), n_in) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ValueError(f"Linear: input width {x.shape[-1]} != {self.weight.shape[0]}")
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    """Last-axis normalisation with an optional learned scale and shift."""

    def __init__(self, dim: int, affine: bool = True, eps: float = 1e-5):
        self.eps = eps
        self.gamma = param(np.ones(dim)) if affine else None
        self.beta = param(np.zeros(dim)) if affine else None

    def forward(self, x):
        y = ad.layer_norm(x, self.eps)
        if self.gamma is not None:
            y = y * self.gamma + self.beta
        return y


_ACTS = {"tanh": ad.tanh, "relu": ad.relu, "gelu": ad.gelu, "silu": ad.silu,
         "sigmoid": ad.sigmoid}


def activation(name: str):
    try:
        return _ACTS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(_ACTS)}") from None


class MLP(Module):
    """Fully connected stack; the activation is skipped after the last layer."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, act: str = "tanh"):
        if len(widths) < 2:
            raise ValueError("MLP needs at least input and output widths")
        self.act = activation(act)
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self.act(x)
        return x
