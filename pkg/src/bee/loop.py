"""The online adaptation loop.

``process_batch`` sees only unlabeled inputs. ``run`` plays the evaluator:
it feeds ``batch.x`` to the adapter, commits the returned predictions, and
only then looks at labels and domain ids to score them.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import car, mcr
from .config import Config
from .netcore import AdamState, Network, ParamSet, adam_step, autodiff as ad, ema_update, forward, forward_graph, softmax_rows
from .stream import Dataset, StreamBatch, sub_rng

log = logging.getLogger(__name__)


class AdaptationError(RuntimeError):
    pass


def build_network(cfg: Config) -> Network:
    return Network(
        widths=(cfg.data.dim, *cfg.model.widths),
        n_classes=cfg.data.n_classes,
        activation=cfg.model.activation,
        shallow=frozenset(cfg.model.shallow),
    )


# -- source training -----------------------------------------------------------


def _ce_loss(net: Network, x: np.ndarray, y: np.ndarray):
    onehot = np.eye(net.n_classes)[y]

    def fn(inputs):
        _, logits = forward_graph(net, inputs, x)
        return ad.cross_entropy(onehot, ad.log_softmax(logits))

    return fn


def train_source(net: Network, params: ParamSet, train: Dataset, epochs: int, batch_size: int = 64, lr: float = 1e-3, seed: int = 0) -> ParamSet:
    """Supervised cross-entropy training of every parameter with Adam."""
    rng = sub_rng(seed, "source.shuffle")
    state = AdamState(lr=lr)
    names = list(params)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            loss, grads = ad.value_and_grad(_ce_loss(net, train.x[idx], train.y[idx]), params, names)
            if not math.isfinite(loss):
                raise AdaptationError(f"source training diverged in epoch {epoch} at sample {start}: loss={loss}")
            params = adam_step(params, grads, state)
    return params


def accuracy(net: Network, params: ParamSet, data: Dataset) -> float:
    _, logits = forward(net, params, data.x)
    return float(np.mean(np.argmax(logits, axis=1) == data.y))


eval_source_holdout = accuracy


# -- adaptation state ----------------------------------------------------------


class SampleQueue:
    """FIFO of recent unlabeled test samples."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self._buf = np.zeros((0, dim))

    def __len__(self) -> int:
        return self._buf.shape[0]

    def push(self, x: np.ndarray) -> None:
        self._buf = np.concatenate([self._buf, x])[-self.capacity :]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Up to ``n`` distinct stored samples, uniformly at random."""
        idx = rng.choice(len(self), size=min(n, len(self)), replace=False)
        return self._buf[idx]


@dataclass
class StepReport:
    step: int
    mcr_loss: float | None
    ent_loss: float | None
    trigger: bool
    n_anchors: int
    merge: dict | None = None
    batch_error_pct: float | None = None
    domain_id: int | None = None


@dataclass
class AdaptState:
    cfg: Config
    net: Network
    student: ParamSet
    teacher: ParamSet
    source: ParamSet
    cb_student: dict[int, mcr.Codebook]
    cb_teacher: dict[int, mcr.Codebook]
    feature_queues: dict[int, mcr.FeatureQueue]
    sample_queue: SampleQueue
    adam: AdamState
    pool: car.AnchorPool
    detector: car.ShiftDetector
    rng: np.random.Generator
    step: int = 0
    trace: list = field(default_factory=list)
    codebook_adam: dict = field(default_factory=dict)

    @property
    def trainable(self) -> list[str]:
        return self.net.trainable_names()


def mcr_blocks(cfg: Config) -> list[int]:
    return sorted(cfg.mcr.blocks) if cfg.mcr.enabled else []


def _detector_blocks(cfg: Config) -> list[int]:
    """Blocks whose consistency loss feeds the trigger, even when MCR updates are off."""
    blocks = mcr_blocks(cfg)
    if not blocks and cfg.car.enabled and cfg.car.timing == "trigger":
        blocks = sorted(cfg.mcr.blocks) or list(range(1, len(cfg.model.widths) + 1))
    return blocks


def _assemble(cfg: Config, net: Network, student: ParamSet, teacher: ParamSet, cb_s: dict, cb_t: dict) -> AdaptState:
    det = cfg.detector
    return AdaptState(
        cfg=cfg,
        net=net,
        student=student.copy(),
        teacher=teacher.copy(),
        source=student.copy(),
        cb_student=cb_s,
        cb_teacher=cb_t,
        feature_queues={j: mcr.FeatureQueue(net.widths[j], cfg.mcr.feature_queue) for j in cb_s},
        sample_queue=SampleQueue(cfg.queue.capacity_batches * cfg.data.batch_size, net.in_dim),
        adam=AdamState(lr=cfg.optim.lr),
        pool=car.AnchorPool(cfg.car.capacity, cfg.car.xi),
        detector=car.ShiftDetector(det.window, det.threshold, det.momentum, det.min_fill, det.sigma_floor),
        rng=sub_rng(cfg.seed, "queue-sampling"),
    )


def _needed_blocks(cfg: Config) -> list[int]:
    return sorted(set(_detector_blocks(cfg)) | set(mcr_blocks(cfg)))


def init_state(cfg: Config, net: Network, source_params: ParamSet, codebook_features: list[np.ndarray] | None = None) -> AdaptState:
    """Fresh adaptation state; teacher starts as a copy of the student."""
    blocks = _needed_blocks(cfg)
    cb_s, cb_t = {}, {}
    if blocks:
        if codebook_features is None:
            raise ValueError("codebook initialisation needs warm-up features")
        rng_cb = sub_rng(cfg.seed, "codebooks")
        cb_s, cb_t = mcr.init_codebooks(codebook_features, cfg.mcr.prototypes, rng_cb, cfg.mcr.tau_student, cfg.mcr.tau_teacher)
        cb_s = {j: cb_s[j] for j in blocks}
        cb_t = {j: cb_t[j] for j in blocks}
    return _assemble(cfg, net, source_params, source_params, cb_s, cb_t)


def state_tensors(state: AdaptState) -> ParamSet:
    """Everything a warmed-up state carries, as named tensors for a checkpoint."""
    entries = [(f"student.{k}", v) for k, v in state.student.items()]
    entries += [(f"teacher.{k}", v) for k, v in state.teacher.items()]
    for j in sorted(state.cb_student):
        entries.append((f"codebook.student.{j}", state.cb_student[j].Q))
        entries.append((f"codebook.teacher.{j}", state.cb_teacher[j].Q))
        entries.append((f"queue.feature.{j}", state.feature_queues[j].contents()))
    return ParamSet(entries)


def restore_state(cfg: Config, net: Network, tensors: ParamSet) -> AdaptState:
    """Inverse of :func:`state_tensors`; the result adapts exactly like the original."""

    def part(prefix):
        return ParamSet([(k[len(prefix) :], v) for k, v in tensors.items() if k.startswith(prefix)])

    student, teacher = part("student."), part("teacher.")
    net.check_params(student)
    net.check_params(teacher)
    cb_s, cb_t = {}, {}
    for j in _needed_blocks(cfg):
        if f"codebook.student.{j}" not in tensors:
            raise ValueError(f"warm-up checkpoint has no codebook for block {j}")
        cb_s[j] = mcr.Codebook(j, tensors[f"codebook.student.{j}"], cfg.mcr.tau_student)
        cb_t[j] = mcr.Codebook(j, tensors[f"codebook.teacher.{j}"], cfg.mcr.tau_teacher)
    state = _assemble(cfg, net, student, teacher, cb_s, cb_t)
    for j, q in state.feature_queues.items():
        q.load(tensors[f"queue.feature.{j}"])
    return state


# -- individual updates ----------------------------------------------------------


def _check_finite(value: float, what: str, step: int) -> None:
    if not math.isfinite(value):
        raise AdaptationError(f"{what} is not finite at step {step}: {value}")


def _mcr_graph(state: AdaptState, x: np.ndarray, blocks, codebook_leaves=None, push=True):
    teacher_feats, _ = forward(state.net, state.teacher, x)
    student_cbs = codebook_leaves if codebook_leaves is not None else state.cb_student
    box = {}

    def fn(inputs):
        feats, _ = forward_graph(state.net, inputs, x)
        terms = mcr.mcr_loss(
            feats,
            teacher_feats,
            {j: (inputs[f"codebook.{j}"] if f"codebook.{j}" in inputs else student_cbs[j]) for j in blocks},
            state.cb_teacher,
            state.feature_queues,
            blocks,
            state.cfg.mcr.sinkhorn_iters,
            tau_student=state.cfg.mcr.tau_student,
            push=push,
        )
        box["per_block"] = terms.per_block
        return terms.total

    return fn, box


def mcr_update(state: AdaptState, x: np.ndarray, update_codebooks: bool = False, push: bool = True) -> float:
    """One Adam step of the student's shallow blocks on the summed block losses.

    ``push`` controls whether the batch's teacher features enter the
    Sinkhorn feature queues; resampled queue batches are not pushed again.
    """
    blocks = mcr_blocks(state.cfg)
    point = dict(state.student.items())
    wrt = list(state.trainable)
    if update_codebooks:
        for j in blocks:
            point[f"codebook.{j}"] = state.cb_student[j].Q
            wrt.append(f"codebook.{j}")
    fn, _ = _mcr_graph(state, x, blocks, push=push)
    loss, grads = ad.value_and_grad(fn, point, wrt)
    _check_finite(loss, "MCR loss", state.step)
    state.trace.append(("mcr", loss))
    if update_codebooks:
        for j in blocks:
            g = grads.pop(f"codebook.{j}")
            cb = state.cb_student[j]
            _codebook_adam(state, j, cb, g)
    state.student = adam_step(state.student, grads, state.adam)
    return loss


def _codebook_adam(state: AdaptState, j: int, cb: mcr.Codebook, grad: np.ndarray) -> None:
    key = f"codebook.{j}"
    holder = ParamSet([(key, cb.Q)])
    holder = adam_step(holder, {key: grad}, state.codebook_adam[j])
    cb.Q = mcr.normalize_columns(holder[key])


def mcr_value(state: AdaptState, x: np.ndarray, blocks) -> float:
    """Consistency loss of the current student without an update."""
    fn, _ = _mcr_graph(state, x, blocks)
    consts = {k: ad.const(v) for k, v in state.student.items()}
    return float(fn(consts).value)


def _prediction_graph(state: AdaptState, student_logits: ad.Var, teacher_logits: np.ndarray) -> ad.Var:
    if state.cfg.loss.prediction == "logit":
        return ad.softmax(ad.scale(ad.add(student_logits, ad.const(teacher_logits)), 0.5))
    p_t = softmax_rows(teacher_logits)
    return ad.add(ad.scale(ad.softmax(student_logits), 0.5), ad.const(0.5 * p_t))


def predict(state: AdaptState, x: np.ndarray) -> np.ndarray:
    """Mean-teacher prediction: average of student and teacher outputs."""
    _, s_logits = forward(state.net, state.student, x)
    _, t_logits = forward(state.net, state.teacher, x)
    return _prediction_graph(state, ad.const(s_logits), t_logits).value


def entropy_update(state: AdaptState, x: np.ndarray) -> float:
    """One Adam step on the entropy of the averaged prediction (fresh forward)."""
    _, t_logits = forward(state.net, state.teacher, x)

    def fn(inputs):
        _, s_logits = forward_graph(state.net, inputs, x)
        return ad.entropy(_prediction_graph(state, s_logits, t_logits))

    loss, grads = ad.value_and_grad(fn, state.student, state.trainable)
    _check_finite(loss, "entropy loss", state.step)
    state.trace.append(("ent", loss))
    state.student = adam_step(state.student, grads, state.adam)
    return loss


def consistency_update(state: AdaptState, x: np.ndarray) -> float:
    """Prediction-level consistency H(teacher(x), student(x')) with optional noise on x'."""
    _, t_logits = forward(state.net, state.teacher, x)
    target = softmax_rows(t_logits)
    sigma = state.cfg.loss.augment_noise
    x_aug = x + sigma * state.rng.standard_normal(x.shape) if sigma > 0 else x

    def fn(inputs):
        _, s_logits = forward_graph(state.net, inputs, x_aug)
        return ad.cross_entropy(target, ad.log_softmax(s_logits))

    loss, grads = ad.value_and_grad(fn, state.student, state.trainable)
    _check_finite(loss, "consistency loss", state.step)
    state.trace.append(("con", loss))
    state.student = adam_step(state.student, grads, state.adam)
    return loss


def ema_teacher(state: AdaptState) -> None:
    state.teacher = ema_update(state.teacher, state.student, state.cfg.optim.ema_momentum, names=state.trainable)


# -- warm-up -----------------------------------------------------------------------


def codebook_features(net: Network, params: ParamSet, source: Dataset, cfg: Config) -> list[np.ndarray]:
    rng = sub_rng(cfg.seed, "warmup.shuffle")
    order = rng.permutation(len(source))
    n = min(len(source), cfg.warmup.init_batches * cfg.data.batch_size)
    feats, _ = forward(net, params, source.x[order[:n]])
    return feats


def warmup(cfg: Config, net: Network, source_params: ParamSet, source: Dataset) -> AdaptState:
    """Initialise codebooks and teacher, then tune shallow blocks and codebooks on source data.

    Afterwards the deep blocks equal ``source_params`` bitwise and the
    codebooks are never touched again.
    """
    feats = codebook_features(net, source_params, source, cfg)
    state = init_state(cfg, net, source_params, feats)
    if not cfg.adapt:
        # the frozen baseline is the source model itself
        return state
    state.codebook_adam = {j: AdamState(lr=cfg.optim.lr) for j in state.cb_student}
    n_steps = int(round(cfg.warmup.epochs * math.ceil(len(source) / cfg.data.batch_size)))
    rng = sub_rng(cfg.seed, "warmup.batches")
    order = np.concatenate([rng.permutation(len(source)) for _ in range(max(1, math.ceil(cfg.warmup.epochs)))])
    bs = cfg.data.batch_size
    m = cfg.optim.ema_momentum
    for i in range(n_steps):
        x = source.x[order[i * bs : (i + 1) * bs]]
        if mcr_blocks(cfg):
            mcr_update(state, x, update_codebooks=True)
            for j, cb in state.cb_teacher.items():
                cb.Q = mcr.normalize_columns(cb.Q + (1.0 - m) * (state.cb_student[j].Q - cb.Q))
        if cfg.loss.entropy:
            entropy_update(state, x)
        ema_teacher(state)
    state.codebook_adam = {}
    # test-time optimisation starts from fresh moments
    state.adam = AdamState(lr=cfg.optim.lr)
    state.source = state.student.copy()
    state.trace.clear()
    return state


# -- per-batch procedure ------------------------------------------------------------------


def process_batch(state: AdaptState, x: np.ndarray) -> tuple[np.ndarray, StepReport]:
    """Adapt on one unlabeled batch and return its committed predictions."""
    cfg = state.cfg
    x = np.asarray(x, dtype=np.float64)
    state.step += 1
    p = state.step
    if not cfg.adapt:
        return predict(state, x), StepReport(p, None, None, False, len(state.pool))

    use_mcr = bool(mcr_blocks(cfg))
    if cfg.queue.enabled:
        state.sample_queue.push(x)
        for _ in range(cfg.queue.inner_steps):
            xb = state.sample_queue.sample(cfg.queue.inner_batch, state.rng)
            if use_mcr:
                mcr_update(state, xb, push=False)
            if cfg.loss.consistency:
                consistency_update(state, xb)
            ema_teacher(state)

    preds = predict(state, x)

    mcr_loss = None
    if use_mcr:
        mcr_loss = mcr_update(state, x)
    ent_loss = entropy_update(state, x) if cfg.loss.entropy else None
    if cfg.loss.consistency:
        consistency_update(state, x)
    ema_teacher(state)

    report = StepReport(p, mcr_loss, ent_loss, False, len(state.pool))
    if cfg.car.enabled:
        car.maybe_store_anchor(state.pool, state.student, p)
        fire = False
        if cfg.car.timing == "trigger":
            signal = mcr_loss if mcr_loss is not None else mcr_value(state, x, _detector_blocks(cfg))
            fire = car.detect_shift(state.detector, signal)
            report.trigger = fire
        elif p % cfg.car.interval == 0:
            fire = True
            report.trigger = True
        if fire and len(state.pool):
            report.merge = replay(state, x)
        report.n_anchors = len(state.pool)
    return preds, report


def replay(state: AdaptState, x: np.ndarray) -> dict:
    """Rewrite the student from the anchor pool; returns the merge event."""
    cfg = state.cfg
    if cfg.car.action == "source-reset":
        state.student = state.source.copy()
        event = {"anchors": [], "weights": [], "action": "source-reset"}
    else:
        cs = car.select_candidates(state.net, state.student, state.pool, x, cfg.car.top_k)
        if cfg.car.action == "average":
            w = np.full(len(cs), 1.0 / len(cs))
        else:
            w = car.ensemble_weights(cs)
        state.student = car.merge(cs.models, w)
        event = {"anchors": cs.anchor_steps, "weights": [float(v) for v in w], "action": cfg.car.action}
    state.adam.reset()
    return event


@dataclass
class RunResult:
    reports: list[StepReport]
    domain_names: list[str]
    domain_errors: list[float]
    predictions: list[np.ndarray]
    holdout_acc: list[float]

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.domain_errors))


def run(state: AdaptState, stream, domain_names: list[str] | None = None, holdout: Dataset | None = None, keep_predictions: bool = False) -> RunResult:
    """Process the whole stream online; score each batch only after predicting it."""
    reports = []
    preds_out = []
    wrong: dict[int, int] = {}
    seen: dict[int, int] = {}
    holdout_acc = []
    prev_domain = None
    for batch in stream:
        if holdout is not None and prev_domain is not None and batch.domain != prev_domain:
            holdout_acc.append(eval_source_holdout(state.net, state.student, holdout))
        preds, report = process_batch(state, batch.x)
        committed = preds.copy()
        if keep_predictions:
            preds_out.append(committed)
        errors = int(np.sum(np.argmax(committed, axis=1) != batch.labels))
        wrong[batch.domain] = wrong.get(batch.domain, 0) + errors
        seen[batch.domain] = seen.get(batch.domain, 0) + len(batch.labels)
        report.batch_error_pct = 100.0 * errors / len(batch.labels)
        report.domain_id = batch.domain
        reports.append(report)
        prev_domain = batch.domain
    if holdout is not None and prev_domain is not None:
        holdout_acc.append(eval_source_holdout(state.net, state.student, holdout))
    ids = sorted(seen)
    names = domain_names or [str(i) for i in ids]
    errs = [100.0 * wrong[i] / seen[i] for i in ids]
    return RunResult(reports, [names[i] if i < len(names) else str(i) for i in ids], errs, preds_out, holdout_acc)


# -- presets and ablations ---------------------------------------------------------------

PRESETS = ("bee", "entropy-only", "source-only", "pred-consistency")


def configure_ablation(cfg: Config, **switches) -> Config:
    """Return a copy of ``cfg`` with ablation switches applied.

    Recognised switches: ``preset``, ``entropy`` (bool), ``mcr_blocks``
    (iterable, empty disables MCR), ``queue`` (bool), ``car`` (bool),
    ``car_strategy`` (``trigger``, ``fixed:N``, ``source-reset``,
    ``average``, ``weighted``), ``consistency`` (bool).
    """
    out = cfg.copy()
    preset = switches.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; expected one of {PRESETS}")
        out.adapt = preset != "source-only"
        if preset == "entropy-only":
            out.mcr.enabled = False
            out.queue.enabled = False
            out.car.enabled = False
        elif preset == "pred-consistency":
            out.mcr.enabled = False
            out.loss.consistency = True
            out.queue.enabled = False
            out.car.enabled = False
    for key, value in switches.items():
        if value is None:
            continue
        if key == "entropy":
            out.loss.entropy = bool(value)
        elif key == "consistency":
            out.loss.consistency = bool(value)
        elif key == "mcr_blocks":
            blocks = tuple(sorted(int(j) for j in value))
            out.mcr.enabled = bool(blocks)
            if blocks:
                out.mcr.blocks = blocks
        elif key == "queue":
            out.queue.enabled = bool(value)
        elif key == "car":
            out.car.enabled = bool(value)
        elif key == "car_strategy":
            out.car.enabled = True
            if value.startswith("fixed:"):
                out.car.timing = "fixed"
                out.car.interval = int(value.split(":", 1)[1])
                out.car.action = "weighted"
            elif value in ("trigger", "weighted"):
                out.car.timing = "trigger"
                out.car.action = "weighted"
            elif value in ("source-reset", "average"):
                out.car.timing = "trigger"
                out.car.action = value
            else:
                raise ValueError(f"unknown CAR strategy {value!r}")
        else:
            raise ValueError(f"unknown ablation switch {key!r}")
    from .config import ConfigError, validate

    problems = validate(out)
    if problems:
        raise ConfigError(problems)
    return out
