"""Multi-level consistency regularisation.

Intermediate features of student and teacher are compressed into M-way
assignment distributions over a frozen codebook of unit-norm prototypes.
Teacher assignments are balanced with a few Sinkhorn-Knopp sweeps over the
current batch plus a queue of recent teacher features, and the student is
trained to match them with a cross-entropy summed over the active blocks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .netcore import autodiff as ad

log = logging.getLogger(__name__)

UNIT_NORM_TOL = 1e-9


@dataclass
class Codebook:
    """Prototype matrix of shape (D_j, M) with unit-norm columns."""

    block: int
    Q: np.ndarray
    temperature: float

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=np.float64)
        if self.Q.ndim != 2 or self.Q.shape[1] < 2:
            raise ValueError(f"codebook needs shape (D, M>=2), got {self.Q.shape}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        norms = np.linalg.norm(self.Q, axis=0)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError("codebook columns must have unit norm")

    @property
    def size(self) -> int:
        return self.Q.shape[1]

    def copy(self, temperature: float | None = None) -> "Codebook":
        return Codebook(self.block, self.Q.copy(), self.temperature if temperature is None else temperature)


def normalize_columns(Q: np.ndarray) -> np.ndarray:
    return Q / np.linalg.norm(Q, axis=0, keepdims=True)


def _normalize_rows(h: np.ndarray) -> np.ndarray:
    return ad.l2_normalize(ad.const(np.asarray(h, dtype=np.float64))).value


def student_assign(h: np.ndarray, cb: Codebook) -> np.ndarray:
    """Row-wise softmax of cosine similarities to the prototypes over tau_s."""
    return ad.softmax_rows(_normalize_rows(h) @ cb.Q / cb.temperature)


def teacher_similarities(h: np.ndarray, cb: Codebook) -> np.ndarray:
    """Cosine similarities to the prototypes divided by tau_t (no softmax)."""
    return _normalize_rows(h) @ cb.Q / cb.temperature


def prototype_marginal_violation(P: np.ndarray) -> float:
    """L1 distance of the per-prototype mass of a samples-by-prototypes plan from 1/M."""
    n, m = P.shape
    return float(np.sum(np.abs(P.sum(axis=0) / n - 1.0 / m)))


def sinkhorn_normalize(scores: np.ndarray, iters: int = 3, history: list | None = None) -> np.ndarray:
    """Balance exp(scores) towards uniform prototype usage.

    ``scores`` is (samples, prototypes) with the temperature already applied.
    Each sweep scales every prototype to total mass 1/M and then every sample
    to 1/N; the result is rescaled so that each sample row sums to one. When
    ``history`` is given, the prototype-marginal L1 violation is appended
    after every sweep.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n, m = scores.shape
    # global shift cancels in the first normalisation; a per-row shift would not
    p = np.exp(scores - scores.max()).T
    p /= p.sum()
    for _ in range(iters):
        p /= p.sum(axis=1, keepdims=True)
        p /= m
        p /= p.sum(axis=0, keepdims=True)
        p /= n
        if history is not None:
            history.append(prototype_marginal_violation(p.T * n))
    p *= n
    return p.T


def mcr_block_loss(p_student: np.ndarray, p_teacher: np.ndarray) -> float:
    """Mean cross-entropy H(teacher, student) in nats; student floored at 1e-12."""
    p_student = np.asarray(p_student, dtype=np.float64)
    p_teacher = np.asarray(p_teacher, dtype=np.float64)
    if p_student.shape != p_teacher.shape:
        raise ValueError(f"shape mismatch {p_student.shape} vs {p_teacher.shape}")
    return float(-np.sum(p_teacher * np.log(np.maximum(p_student, ad.PROB_FLOOR))) / p_student.shape[0])


def block_loss_graph(h_student: ad.Var, Q_student: ad.Var, temperature: float, target: np.ndarray) -> ad.Var:
    """Graph version of the per-block loss; gradients reach the features and, if a leaf, the codebook."""
    sims = ad.matmul(ad.l2_normalize(h_student), Q_student)
    return ad.cross_entropy(target, ad.log_softmax(sims, temperature))


class FeatureQueue:
    """Ring buffer of unit-norm teacher features for one block, oldest evicted first."""

    def __init__(self, dim: int, capacity: int):
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.dim = dim
        self.capacity = capacity
        self._buf = np.zeros((0, dim))

    def __len__(self) -> int:
        return self._buf.shape[0]

    def push(self, feats: np.ndarray) -> None:
        if self.capacity == 0:
            return
        feats = _normalize_rows(feats)
        self._buf = np.concatenate([self._buf, feats])[-self.capacity :]

    def contents(self) -> np.ndarray:
        return self._buf.copy()

    def load(self, rows: np.ndarray) -> None:
        """Restore saved contents verbatim (rows are assumed already normalised)."""
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.dim)
        self._buf = rows[-self.capacity :].copy() if self.capacity else np.zeros((0, self.dim))

    def clear(self) -> None:
        self._buf = np.zeros((0, self.dim))


def balanced_teacher_targets(h_teacher: np.ndarray, cb: Codebook, queue: FeatureQueue | None, iters: int) -> np.ndarray:
    """Sinkhorn-balanced teacher assignments for the current batch rows only."""
    scores = teacher_similarities(h_teacher, cb)
    n = scores.shape[0]
    if queue is not None and len(queue):
        scores = np.concatenate([scores, queue.contents() @ cb.Q / cb.temperature])
    return sinkhorn_normalize(scores, iters)[:n]


@dataclass
class MCRTerms:
    total: ad.Var
    per_block: dict[int, float]


def mcr_loss(
    student_feats: Sequence[ad.Var],
    teacher_feats: Sequence[np.ndarray],
    student_codebooks: Mapping[int, ad.Var | Codebook],
    teacher_codebooks: Mapping[int, Codebook],
    queues: Mapping[int, FeatureQueue] | None,
    active_blocks,
    iters: int = 3,
    tau_student: float | None = None,
    push: bool = True,
) -> MCRTerms:
    """Sum of per-block losses over ``active_blocks`` (1-based).

    ``student_codebooks`` values may be Codebook objects (frozen) or graph
    leaves holding Q (warm-up); in the latter case ``tau_student`` must be
    given. Teacher features of the batch are pushed into the queues after
    the targets are computed.
    """
    active = sorted(active_blocks)
    bad = [j for j in active if not 1 <= j <= len(student_feats)]
    if bad:
        raise ValueError(f"active blocks out of range: {bad}")
    terms = []
    per_block = {}
    for j in active:
        cb_t = teacher_codebooks[j]
        queue = queues.get(j) if queues else None
        target = balanced_teacher_targets(teacher_feats[j - 1], cb_t, queue, iters)
        cb_s = student_codebooks[j]
        if isinstance(cb_s, Codebook):
            Q_s, tau = ad.const(cb_s.Q), cb_s.temperature
        else:
            Q_s, tau = cb_s, tau_student
        term = block_loss_graph(student_feats[j - 1], Q_s, tau, target)
        terms.append(term)
        per_block[j] = float(term.value)
    if push and queues:
        for j in active:
            if j in queues:
                queues[j].push(teacher_feats[j - 1])
    return MCRTerms(ad.add_scalars(terms), per_block)


def init_codebooks(
    warmup_features: Sequence[np.ndarray],
    n_prototypes: int,
    rng: np.random.Generator,
    tau_student: float = 0.1,
    tau_teacher: float = 0.05,
) -> tuple[dict[int, Codebook], dict[int, Codebook]]:
    """Seed each block's codebook with normalised warm-up features.

    Columns are drawn without replacement; the teacher codebook starts as an
    exact copy of the student's.
    """
    student, teacher = {}, {}
    for j, feats in enumerate(warmup_features, start=1):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] < n_prototypes:
            raise ValueError(f"block {j}: {feats.shape[0]} warm-up features for {n_prototypes} prototypes")
        idx = rng.choice(feats.shape[0], size=n_prototypes, replace=False)
        Q = _normalize_rows(feats[idx]).T.copy()
        if np.unique(Q, axis=1).shape[1] < n_prototypes:
            log.warning("block %d: duplicate warm-up features produced duplicate prototypes", j)
        student[j] = Codebook(j, Q, tau_student)
        teacher[j] = Codebook(j, Q.copy(), tau_teacher)
    return student, teacher
