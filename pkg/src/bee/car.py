"""Complementary anchor replay.

Periodic student snapshots go into a bounded FIFO pool. A z-score detector
watches the smoothed consistency loss; when it spikes, the anchors whose
predictions on the current batch disagree most with the student are merged
back into it with softmax weights over their total pairwise divergence.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .netcore import Network, ParamSet, check_compatible, predict_proba
from .netcore.autodiff import PROB_FLOOR


@dataclass(frozen=True)
class Anchor:
    step: int
    params: ParamSet


class AnchorPool:
    def __init__(self, capacity: int = 50, period: int = 30):
        if capacity < 1 or period < 1:
            raise ValueError("capacity and period must be >= 1")
        self.capacity = capacity
        self.period = period
        self._entries: deque[Anchor] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def add(self, params: ParamSet, step: int) -> None:
        self._entries.append(Anchor(step, params.copy()))

    def steps(self) -> list[int]:
        return [a.step for a in self._entries]


def maybe_store_anchor(pool: AnchorPool, student: ParamSet, step: int) -> bool:
    """Snapshot the student when ``step`` is a multiple of the pool period."""
    if step % pool.period == 0:
        pool.add(student, step)
        return True
    return False


@dataclass
class ShiftDetector:
    """z-score spike detector over an EMA-smoothed loss stream."""

    window: int = 100
    threshold: float = 1.5
    momentum: float = 0.9
    min_fill: int = 20
    sigma_floor: float = 1e-8
    smoothed: float | None = None
    values: deque = field(default_factory=deque)
    last_z: float = 0.0

    def __post_init__(self):
        if self.window < 1 or self.min_fill < 1:
            raise ValueError("window and min_fill must be >= 1")
        self.values = deque(self.values, maxlen=self.window)

    def reset(self) -> None:
        self.smoothed = None
        self.values.clear()
        self.last_z = 0.0


def detect_shift(det: ShiftDetector, loss_value: float) -> bool:
    """Feed one loss value; True when the smoothed value jumps above the window.

    The window is cleared on a trigger and the smoothed value is always
    pushed afterwards.
    """
    if not math.isfinite(loss_value):
        raise ValueError(f"loss value must be finite, got {loss_value}")
    if det.smoothed is None:
        det.smoothed = float(loss_value)
    else:
        det.smoothed = det.momentum * det.smoothed + (1.0 - det.momentum) * float(loss_value)
    fired = False
    det.last_z = 0.0
    if len(det.values) >= det.min_fill:
        arr = np.fromiter(det.values, dtype=np.float64)
        mu = arr.mean()
        sigma = max(arr.std(), det.sigma_floor)
        det.last_z = (det.smoothed - mu) / sigma
        if det.last_z > det.threshold:
            det.values.clear()
            fired = True
    det.values.append(det.smoothed)
    return fired


def _check_stochastic(P: np.ndarray, name: str) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError(f"{name} rows must be nonnegative and sum to 1")
    return np.maximum(P, PROB_FLOOR)


def sym_kl(P: np.ndarray, Q: np.ndarray) -> float:
    """Row-averaged 0.5 * (KL(P||Q) + KL(Q||P)) in nats."""
    P = _check_stochastic(P, "P")
    Q = _check_stochastic(Q, "Q")
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {Q.shape}")
    # (P - Q)(log P - log Q) summed is exactly KL(P||Q) + KL(Q||P) and is
    # symmetric in P, Q operation-for-operation
    d = np.sum((P - Q) * (np.log(P) - np.log(Q)), axis=1)
    return float(0.5 * np.mean(d))


def divergence(net: Network, a: ParamSet, b: ParamSet, batch: np.ndarray) -> float:
    return sym_kl(predict_proba(net, a, batch), predict_proba(net, b, batch))


@dataclass
class CandidateSet:
    """Current student (index 0) plus the selected anchors."""

    models: list[ParamSet]
    anchor_steps: list[int]
    probs: list[np.ndarray]
    divergences: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.models)


def pairwise_divergences(probs: list[np.ndarray]) -> np.ndarray:
    k = len(probs)
    D = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            D[i, j] = D[j, i] = sym_kl(probs[i], probs[j])
    return D


def select_candidates(net: Network, student: ParamSet, pool: AnchorPool, batch: np.ndarray, k: int) -> CandidateSet:
    """Student plus the ``k`` anchors whose predictions diverge most from it.

    Ties go to the newer anchor.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    p_s = predict_proba(net, student, batch)
    anchors = list(pool)
    scored = []
    for anchor in anchors:
        check_compatible(student, anchor.params)
        p_a = predict_proba(net, anchor.params, batch)
        scored.append((sym_kl(p_s, p_a), anchor.step, anchor, p_a))
    scored.sort(key=lambda t: (-t[0], -t[1]))
    chosen = scored[:k]
    cs = CandidateSet(
        models=[student] + [c[2].params for c in chosen],
        anchor_steps=[c[1] for c in chosen],
        probs=[p_s] + [c[3] for c in chosen],
    )
    cs.divergences = pairwise_divergences(cs.probs)
    return cs


def softmax_weights(totals: np.ndarray) -> np.ndarray:
    z = np.asarray(totals, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def ensemble_weights(cs: CandidateSet) -> np.ndarray:
    """Softmax over each member's summed divergence to the rest of the set."""
    if len(cs) < 1:
        raise ValueError("empty candidate set")
    D = cs.divergences if cs.divergences is not None else pairwise_divergences(cs.probs)
    return softmax_weights(D.sum(axis=1))


def merge(models: list[ParamSet], weights) -> ParamSet:
    """Elementwise convex combination of architecture-compatible ParamSets."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(models) != len(weights) or len(models) == 0:
        raise ValueError("need one weight per model")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be nonnegative and sum to 1, got {weights}")
    base = models[0]
    for other in models[1:]:
        check_compatible(base, other)
    out = {}
    for name in base:
        ref = base[name]
        acc = ref.copy()
        for w, other in zip(weights[1:], models[1:]):
            acc = acc + w * (other[name] - ref)
        stack = np.stack([m[name] for m in models])
        out[name] = np.clip(acc, stack.min(axis=0), stack.max(axis=0))
    return base.replace(out)
