"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad


def numeric_grad(loss_fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` with respect to every entry of ``leaf``.

    Complex leaves are perturbed along the real and imaginary axes separately
    and the result packed as ``dL/dRe + i dL/dIm``.
    """
    data = leaf.data
    out = np.zeros_like(data)
    flat = data.reshape(-1)
    res = out.reshape(-1)
    dirs = (1.0, 1j) if np.iscomplexobj(data) else (1.0,)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            for d in dirs:
                flat[i] = orig + h * d
                fp = float(loss_fn().data)
                flat[i] = orig - h * d
                fm = float(loss_fn().data)
                flat[i] = orig
                res[i] += d * (fp - fm) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``, zero when both vanish."""
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def check_gradients(loss_fn: Callable[[], Tensor], leaves: Sequence[Tensor],
                    h: float = 1e-5) -> dict[int, float]:
    """Relative error between analytic and numeric gradients, per leaf index."""
    loss = loss_fn()
    found = backward(loss)
    errs = {}
    for i, leaf in enumerate(leaves):
        analytic = found.get(leaf, np.zeros_like(leaf.data))
        errs[i] = relative_error(analytic, numeric_grad(loss_fn, leaf, h))
    return errs
