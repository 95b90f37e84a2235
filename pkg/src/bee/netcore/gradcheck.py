from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np

from . import autodiff as ad


def numeric_grad(fn: Callable[[Mapping[str, ad.Var]], ad.Var], point: Mapping[str, np.ndarray], name: str, eps: float) -> np.ndarray:
    """Central differences of ``fn`` with respect to one entry of ``point``."""
    base = {k: np.array(v, dtype=np.float64) for k, v in point.items()}
    x = base[name]
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn({k: ad.const(v) for k, v in base.items()}).value)
        flat[i] = orig - eps
        down = float(fn({k: ad.const(v) for k, v in base.items()}).value)
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * eps)
    return out


def grad_check(fn: Callable[[Mapping[str, ad.Var]], ad.Var], point: Mapping[str, np.ndarray], eps: float = 1e-5, wrt: Iterable[str] | None = None) -> float:
    """Largest relative disagreement between reverse-mode and central-difference gradients.

    For each parameter tensor the error is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-8)``;
    the maximum over tensors is returned. NaN on either side gives ``inf``.
    """
    names = list(point) if wrt is None else list(wrt)
    _, analytic = ad.value_and_grad(fn, point, names)
    worst = 0.0
    for name in names:
        a = analytic[name]
        n = numeric_grad(fn, point, name, eps)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
            return float("inf")
        denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n), initial=0.0) / denom))
    return worst
