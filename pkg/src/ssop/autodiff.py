"""Minimal dense-tensor reverse-mode automatic differentiation.

A :class:`Tensor` wraps a float64 (or complex128) numpy array. Every primitive
applied to tensors that require gradients records a node holding its parents
and a closure mapping the output cotangent to parent cotangents. Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order.

Complex values follow the convention that the gradient of a real loss ``L``
with respect to ``z = a + ib`` is ``dL/da + i dL/db``. Under that convention a
holomorphic primitive ``f`` propagates ``g -> g * conj(f'(z))``, which reduces
to the ordinary chain rule on real data.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "tensor", "no_grad", "is_grad_enabled", "make_node", "backward",
    "grad", "add", "sub", "mul", "div", "neg", "power", "matmul", "einsum",
    "exp", "log", "expm1", "tanh", "sigmoid", "silu", "softplus", "relu",
    "gelu", "sqrt", "square", "abs_", "sum_", "mean", "reshape", "transpose",
    "swapaxes", "broadcast_to", "concat", "stack", "getitem", "softmax",
    "layer_norm", "causal_conv1d", "rfft", "irfft", "real", "imag", "conj",
    "complex_", "scaled_dot_attention", "zeros", "ones",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data)
    if np.iscomplexobj(arr):
        return arr.astype(np.complex128, copy=False)
    return arr.astype(np.float64, copy=False)


class Tensor:
    """Dense array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar -----------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def backward(self):
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a primitive.

    ``backward_fn`` receives the output cotangent and returns one cotangent (or
    ``None``) per parent. The node is only recorded when grad mode is on and
    at least one parent requires a gradient.
    """
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _conj(a: np.ndarray) -> np.ndarray:
    return np.conj(a) if np.iscomplexobj(a) else a


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...], complex_target: bool) -> np.ndarray:
    if not complex_target and np.iscomplexobj(g):
        g = g.real
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _fit(g, parent: Tensor):
    return _unbroadcast(g, parent.shape, parent.is_complex)


# ---------------------------------------------------------------------------
# graph traversal


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``root``.

    Returns a mapping from every ``requires_grad`` leaf reached to its gradient
    and also stores that gradient on ``leaf.grad`` (overwriting).
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if np.iscomplexobj(root.data):
        raise ValueError("backward needs a real-valued root")
    if not root.requires_grad:
        return {}
    order = _toposort(root)
    cot: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = cot.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            node.grad = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in cot:
                cot[key] = cot[key] + pg
            else:
                cot[key] = pg
    return leaves


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``root`` for each tensor in ``wrt`` (zeros if unreached)."""
    wrt = list(wrt)
    found = backward(root)
    return [found.get(t, np.zeros_like(t.data)) for t in wrt]


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_fit(g, a), _fit(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_fit(g, a), _fit(-g, b)), "sub")


def neg(a) -> Tensor:
    a = _lift(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        ga = _fit(g * _conj(b.data), a) if a.requires_grad else None
        gb = _fit(g * _conj(a.data), b) if b.requires_grad else None
        return ga, gb

    return make_node(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def bw(g):
        ga = _fit(g / _conj(b.data), a) if a.requires_grad else None
        gb = _fit(-g * _conj(out / b.data), b) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), bw, "div")


def power(a, exponent: float) -> Tensor:
    a = _lift(a)
    if isinstance(exponent, Tensor):
        raise TypeError("power: exponent must be a constant")
    p = float(exponent)
    out = a.data ** p
    return make_node(out, (a,), lambda g: (g * _conj(p * a.data ** (p - 1)),), "pow")


def square(a) -> Tensor:
    a = _lift(a)
    return make_node(a.data * a.data, (a,), lambda g: (g * _conj(2.0 * a.data),), "square")


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * _conj(0.5 / out),), "sqrt")


def abs_(a) -> Tensor:
    a = _lift(a)
    if a.is_complex:
        raise TypeError("abs_: real input required")
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def _check_matmul(a: np.ndarray, b: np.ndarray) -> None:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    _check_matmul(a.data, b.data)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ValueError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _fit(np.matmul(g, _conj(np.swapaxes(b.data, -1, -2))), a)
        if b.requires_grad:
            gb = _fit(np.matmul(_conj(np.swapaxes(a.data, -1, -2)), g), b)
        return ga, gb

    return make_node(out, (a, b), bw, "matmul")


def _parse_einsum(spec: str) -> tuple[str, str, str]:
    spec = spec.replace(" ", "")
    if "->" not in spec or "." in spec:
        raise ValueError(f"einsum: explicit output without ellipsis required, got {spec!r}")
    lhs, out = spec.split("->")
    ops = lhs.split(",")
    if len(ops) != 2:
        raise ValueError("einsum: exactly two operands supported")
    sa, sb = ops
    for s in (sa, sb, out):
        if len(set(s)) != len(s):
            raise ValueError(f"einsum: repeated index inside one operand in {spec!r}")
    return sa, sb, out


def _einsum_grad(g, out, other_s, other, target_s, target_shape):
    keep = "".join(c for c in target_s if c in out or c in other_s)
    r = np.einsum(f"{out},{other_s}->{keep}", g, _conj(other), optimize=True)
    if keep != target_s:
        for i, c in enumerate(target_s):
            if c not in keep:
                r = np.expand_dims(r, i)
        r = np.broadcast_to(r, target_shape).copy()
    return r


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum with an explicit output (e.g. ``"bli,io->blo"``)."""
    a, b = _lift(a), _lift(b)
    sa, sb, so = _parse_einsum(spec)
    if len(sa) != a.ndim or len(sb) != b.ndim:
        raise ValueError(f"einsum {spec!r}: operand ranks {a.shape} and {b.shape} do not match")
    try:
        out = np.einsum(f"{sa},{sb}->{so}", a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ValueError(f"einsum {spec!r}: shapes {a.shape} and {b.shape} do not conform") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _fit(_einsum_grad(g, so, sb, b.data, sa, a.shape), a)
        if b.requires_grad:
            gb = _fit(_einsum_grad(g, so, sa, a.data, sb, b.shape), b)
        return ga, gb

    return make_node(out, (a, b), bw, "einsum")


# ---------------------------------------------------------------------------
# elementwise functions


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * _conj(out),), "exp")


def expm1(a) -> Tensor:
    a = _lift(a)
    out = np.expm1(a.data)
    return make_node(out, (a,), lambda g: (g * _conj(out + 1.0),), "expm1")


def log(a) -> Tensor:
    a = _lift(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / _conj(a.data),), "log")


def _real_only(a: Tensor, name: str) -> None:
    if a.is_complex:
        raise TypeError(f"{name}: real input required")


def tanh(a) -> Tensor:
    a = _lift(a)
    _real_only(a, "tanh")
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return special.expit(x)


def sigmoid(a) -> Tensor:
    a = _lift(a)
    _real_only(a, "sigmoid")
    out = _sigmoid(a.data)
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def silu(a) -> Tensor:
    a = _lift(a)
    _real_only(a, "silu")
    s = _sigmoid(a.data)
    out = a.data * s
    return make_node(out, (a,), lambda g: (g * (s + out * (1.0 - s)),), "silu")


def softplus(a) -> Tensor:
    a = _lift(a)
    _real_only(a, "softplus")
    out = np.logaddexp(0.0, a.data)
    return make_node(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def relu(a) -> Tensor:
    a = _lift(a)
    _real_only(a, "relu")
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _lift(a)
    _real_only(a, "gelu")
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT1_2))
    out = x * cdf

    def bw(g):
        return (g * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)),)

    return make_node(out, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from exc
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _lift(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(np.transpose(a.data, axes), (a,),
                     lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = _lift(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = _lift(a)
    out = np.broadcast_to(a.data, shape)
    return make_node(out, (a,), lambda g: (_fit(g, a),), "broadcast")


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, idx) -> Tensor:
    a = _lift(a)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return make_node(out, (a,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in ts]
        raise ValueError(f"concat: shapes {shapes} do not conform on axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(_fit(p, t) for p, t in zip(parts, ts))

    return make_node(out, ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in ts]
        raise ValueError(f"stack: shapes {shapes} differ") from exc

    def bw(g):
        return tuple(_fit(np.take(g, i, axis=axis), t) for i, t in enumerate(ts))

    return make_node(out, ts, bw, "stack")


# ---------------------------------------------------------------------------
# normalisation


def softmax(a, axis: int = -1) -> Tensor:
    a = _lift(a)
    _real_only(a, "softmax")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), bw, "softmax")


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis without affine terms.

    A constant row maps to the zero vector because ``eps`` keeps the
    denominator positive.
    """
    a = _lift(a)
    _real_only(a, "layer_norm")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return make_node(y, (a,), bw, "layer_norm")


# ---------------------------------------------------------------------------
# sequence primitives


def causal_conv1d(x, weight, bias=None) -> Tensor:
    """Depthwise causal convolution along the time axis.

    ``x`` is ``[..., L, C]``, ``weight`` is ``[C, K]`` and ``bias`` is ``[C]``.
    ``y[t, c] = sum_k weight[c, k] * x[t - K + 1 + k, c]`` with zeros before
    the first step, so ``weight[:, -1]`` multiplies the current input and the
    output at ``t`` never sees ``x`` beyond ``t``.
    """
    x, weight = _lift(x), _lift(weight)
    if x.ndim < 2 or weight.ndim != 2 or weight.shape[0] != x.shape[-1]:
        raise ValueError(f"causal_conv1d: x {x.shape} and weight {weight.shape} do not conform")
    K = weight.shape[1]
    L = x.shape[-2]
    pad = [(0, 0)] * x.ndim
    pad[-2] = (K - 1, 0)
    xp = np.pad(x.data, pad)
    w = weight.data
    out = np.zeros(x.shape)
    for k in range(K):
        out += xp[..., k:k + L, :] * w[:, k]
    parents: tuple = (x, weight)
    if bias is not None:
        bias = _lift(bias)
        if bias.shape != (x.shape[-1],):
            raise ValueError(f"causal_conv1d: bias {bias.shape} must be ({x.shape[-1]},)")
        out = out + bias.data
        parents = (x, weight, bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for k in range(K):
                gxp[..., k:k + L, :] += g * w[:, k]
            gx = gxp[..., K - 1:, :]
        if weight.requires_grad:
            lead = tuple(range(g.ndim - 1))
            gw = np.stack([(g * xp[..., k:k + L, :]).sum(axis=lead) for k in range(K)], axis=1)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return make_node(out, parents, bw, "causal_conv1d")


def _fit_length(arr: np.ndarray, length: int, axis: int) -> np.ndarray:
    cur = arr.shape[axis]
    if cur == length:
        return arr
    if cur > length:
        return np.take(arr, np.arange(length), axis=axis)
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (0, length - cur)
    return np.pad(arr, pad)


def _half_weights(n: int, bins: int, ndim: int, axis: int) -> np.ndarray:
    w = np.full(bins, 2.0)
    w[0] = 1.0
    if n % 2 == 0 and bins > n // 2:
        w[n // 2] = 1.0
    shape = [1] * ndim
    shape[axis] = bins
    return w.reshape(shape)


def rfft(x, n: int | None = None, axis: int = -1) -> Tensor:
    """Real-input FFT; ``n`` zero-pads or truncates like ``numpy.fft.rfft``."""
    x = _lift(x)
    _real_only(x, "rfft")
    axis = axis % x.ndim
    n = x.shape[axis] if n is None else int(n)
    if n < 1:
        raise ValueError(f"rfft: transform length must be >= 1, got {n}")
    out = np.fft.rfft(x.data, n=n, axis=axis)
    length = x.shape[axis]

    def bw(g):
        bins = g.shape[axis]
        full = n * np.fft.irfft(g / _half_weights(n, bins, g.ndim, axis), n=n, axis=axis)
        return (_fit_length(full, length, axis),)

    return make_node(out, (x,), bw, "rfft")


def irfft(X, n: int | None = None, axis: int = -1) -> Tensor:
    """Inverse of :func:`rfft`; output length ``n`` defaults to ``2*(bins-1)``."""
    X = _lift(X)
    axis = axis % X.ndim
    bins = X.shape[axis]
    n = 2 * (bins - 1) if n is None else int(n)
    if n < 1:
        raise ValueError(f"irfft: output length must be >= 1, got {n}")
    data = X.data if X.is_complex else X.data.astype(np.complex128)
    out = np.fft.irfft(data, n=n, axis=axis)

    def bw(g):
        spec = np.fft.rfft(g, n=n, axis=axis)
        spec = spec * (_half_weights(n, spec.shape[axis], g.ndim, axis) / n)
        return (_fit(_fit_length(spec, bins, axis), X),)

    return make_node(out, (X,), bw, "irfft")


def real(z) -> Tensor:
    z = _lift(z)
    if not z.is_complex:
        return z
    return make_node(z.data.real.copy(), (z,), lambda g: (g.astype(np.complex128),), "real")


def imag(z) -> Tensor:
    z = _lift(z)
    return make_node(np.imag(z.data).copy(), (z,), lambda g: (1j * g,), "imag")


def conj(z) -> Tensor:
    z = _lift(z)
    if not z.is_complex:
        return z
    return make_node(np.conj(z.data), (z,), lambda g: (np.conj(g),), "conj")


def complex_(re, im) -> Tensor:
    re, im = _lift(re), _lift(im)
    if re.is_complex or im.is_complex:
        raise TypeError("complex_: real and imaginary parts must be real")
    out = re.data + 1j * im.data
    return make_node(out, (re, im),
                     lambda g: (_fit(g.real, re), _fit(g.imag, im)), "complex")


def scaled_dot_attention(q, k, v, scale: float | None = None) -> Tensor:
    """``softmax(q k^T * scale) v`` over the last two axes, fused.

    Only the probability matrix is kept for the backward pass, which matters
    for long sequences where it is the dominant allocation.
    """
    q, k, v = _lift(q), _lift(k), _lift(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ValueError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d) if scale is None else scale
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2))
    s *= scale
    if not np.all(np.isfinite(s)):
        raise FloatingPointError("attention: non-finite logits")
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    p = s
    out = np.matmul(p, v.data)

    def bw(g):
        gv = _fit(np.matmul(np.swapaxes(p, -1, -2), g), v) if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            gs = np.matmul(g, np.swapaxes(v.data, -1, -2))
            gs -= (gs * p).sum(axis=-1, keepdims=True)
            gs *= p
            gs *= scale
            if q.requires_grad:
                gq = _fit(np.matmul(gs, k.data), q)
            if k.requires_grad:
                gk = _fit(np.matmul(np.swapaxes(gs, -1, -2), q.data), k)
        return gq, gk, gv

    return make_node(out, (q, k, v), bw, "attention")
