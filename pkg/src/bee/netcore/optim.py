from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet, check_compatible


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        """Drop the moment estimates and restart bias correction."""
        self.step = 0
        self.m.clear()
        self.v.clear()


def adam_step(params: ParamSet, grads, state: AdamState) -> ParamSet:
    """One bias-corrected Adam update of the entries named in ``grads``.

    Entries of ``params`` without a gradient are carried over untouched.
    ``state`` is advanced in place.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if np.shape(g) != params[name].shape:
            raise ValueError(f"{name}: gradient shape {np.shape(g)} != parameter shape {params[name].shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    updates = {}
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        updates[name] = params[name] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params.replace(updates)


def ema_update(teacher: ParamSet, student: ParamSet, momentum: float, names=None) -> ParamSet:
    """Elementwise ``momentum * teacher + (1 - momentum) * student``.

    ``names`` restricts the blend to a subset; other teacher entries are
    copied unchanged.
    """
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1], got {momentum}")
    check_compatible(teacher, student)
    keys = teacher.keys() if names is None else names
    updates = {}
    for k in keys:
        if momentum == 0.0:
            updates[k] = student[k]
        elif momentum == 1.0:
            updates[k] = teacher[k]
        else:
            t, s = teacher[k], student[k]
            blended = momentum * t + (1.0 - momentum) * s
            # rounding may leave the hull by an ulp
            updates[k] = np.clip(blended, np.minimum(t, s), np.maximum(t, s))
    return teacher.replace(updates)
