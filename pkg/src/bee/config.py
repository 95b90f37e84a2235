"""Experiment configuration.

Files are flat ``key = value`` text with dotted section prefixes::

    # comment
    car.xi = 30
    mcr.blocks = 2,3,4

Every key is validated on load; unknown keys and bad values are collected
and reported together.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


@dataclass
class DataConfig:
    dim: int = 32
    n_classes: int = 10
    sigma0: float = 1.0
    center_scale: float = 1.0
    n_train: int = 5000
    n_holdout: int = 2000
    domains: int = 8
    batches_per_domain: int = 50
    batch_size: int = 64


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (64, 64, 64, 64)
    activation: str = "gelu"
    shallow: tuple[int, ...] = (1,)


@dataclass
class SourceConfig:
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3


@dataclass
class WarmupConfig:
    epochs: float = 1.0
    init_batches: int = 4


@dataclass
class OptimConfig:
    lr: float = 1e-3
    ema_momentum: float = 0.999


@dataclass
class LossConfig:
    entropy: bool = True
    consistency: bool = False
    augment_noise: float = 0.0
    prediction: str = "prob"


@dataclass
class MCRConfig:
    enabled: bool = True
    blocks: tuple[int, ...] = (2, 3, 4)
    prototypes: int = 64
    tau_student: float = 0.1
    tau_teacher: float = 0.05
    sinkhorn_iters: int = 3
    feature_queue: int = 512


@dataclass
class QueueConfig:
    enabled: bool = True
    inner_steps: int = 2
    inner_batch: int = 64
    capacity_batches: int = 10


@dataclass
class CARConfig:
    enabled: bool = True
    timing: str = "trigger"
    interval: int = 160
    action: str = "weighted"
    top_k: int = 5
    xi: int = 30
    capacity: int = 50


@dataclass
class DetectorConfig:
    window: int = 100
    threshold: float = 1.5
    momentum: float = 0.9
    min_fill: int = 20
    sigma_floor: float = 1e-8


@dataclass
class Config:
    seed: int = 0
    adapt: bool = True
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    mcr: MCRConfig = field(default_factory=MCRConfig)
    queue: QueueConfig = field(default_factory=QueueConfig)
    car: CARConfig = field(default_factory=CARConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def copy(self) -> "Config":
        return from_flat(to_flat(self))


SECTIONS = ["data", "model", "source", "warmup", "optim", "loss", "mcr", "queue", "car", "detector"]


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def to_flat(cfg: Config) -> dict[str, str]:
    out = {"seed": str(cfg.seed), "adapt": _format(cfg.adapt)}
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            out[f"{section}.{f.name}"] = _format(getattr(sub, f.name))
    return out


def dumps(cfg: Config) -> str:
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


def _parse(raw: str, typ, key: str) -> Any:
    raw = raw.strip()
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    if typ in (str, "str"):
        return raw
    if typ in ("tuple[int, ...]",):
        return tuple(int(p) for p in raw.replace(" ", "").split(",") if p) if raw not in ("", "none") else ()
    raise TypeError(f"{key}: unsupported field type {typ!r}")


def _field_types(obj) -> dict[str, Any]:
    return {f.name: f.type for f in fields(obj)}


def from_flat(flat: dict[str, str], base: Config | None = None) -> Config:
    cfg = dataclasses.replace(base) if base is not None else Config()
    # deep copy sections so the base is never mutated
    for section in SECTIONS:
        setattr(cfg, section, dataclasses.replace(getattr(cfg, section)))
    problems = []
    top_types = {"seed": "int", "adapt": "bool"}
    for key, raw in flat.items():
        try:
            if key in top_types:
                setattr(cfg, key, _parse(str(raw), top_types[key], key))
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                problems.append(f"unknown key {key!r}")
                continue
            sub = getattr(cfg, section)
            types = _field_types(sub)
            if name not in types:
                problems.append(f"unknown key {key!r}")
                continue
            setattr(sub, name, _parse(str(raw), types[name], key))
        except (ValueError, TypeError) as exc:
            problems.append(f"{key}: {exc}")
    problems.extend(validate(cfg))
    if problems:
        raise ConfigError(problems)
    return cfg


def parse_text(text: str) -> dict[str, str]:
    flat = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected 'key = value'")
            continue
        key, value = (s.strip() for s in line.split("=", 1))
        if key in flat:
            problems.append(f"line {lineno}: duplicate key {key!r}")
        flat[key] = value
    if problems:
        raise ConfigError(problems)
    return flat


def load(path, overrides: dict[str, str] | None = None) -> Config:
    flat = parse_text(Path(path).read_text()) if path else {}
    flat.update(overrides or {})
    return from_flat(flat)


def validate(cfg: Config) -> list[str]:
    p = []

    def need(cond, msg):
        if not cond:
            p.append(msg)

    d = cfg.data
    need(d.dim >= 2, "data.dim must be >= 2")
    need(d.n_classes >= 2, "data.n_classes must be >= 2")
    need(d.sigma0 >= 0, "data.sigma0 must be >= 0")
    need(d.domains >= 1 and d.batches_per_domain >= 1 and d.batch_size >= 1, "data.domains, data.batches_per_domain, data.batch_size must be >= 1")
    need(d.n_train >= 1 and d.n_holdout >= 1, "data.n_train and data.n_holdout must be >= 1")
    need(len(cfg.model.widths) >= 1 and all(w >= 1 for w in cfg.model.widths), "model.widths must be positive")
    need(cfg.model.activation in ("gelu", "identity"), "model.activation must be gelu or identity")
    L = len(cfg.model.widths)
    need(all(1 <= j <= L for j in cfg.model.shallow), f"model.shallow entries must lie in 1..{L}")
    need(cfg.source.epochs >= 0 and cfg.source.batch_size >= 1 and cfg.source.lr > 0, "source.* out of range")
    need(cfg.warmup.epochs >= 0 and cfg.warmup.init_batches >= 1, "warmup.* out of range")
    need(cfg.optim.lr > 0, "optim.lr must be > 0")
    need(0.0 <= cfg.optim.ema_momentum <= 1.0, "optim.ema_momentum must lie in [0, 1]")
    need(cfg.loss.prediction in ("prob", "logit"), "loss.prediction must be prob or logit")
    need(cfg.loss.augment_noise >= 0, "loss.augment_noise must be >= 0")
    m = cfg.mcr
    need(all(1 <= j <= L for j in m.blocks), f"mcr.blocks entries must lie in 1..{L}")
    need(m.prototypes >= 2, "mcr.prototypes must be >= 2")
    need(m.tau_student > 0 and m.tau_teacher > 0, "mcr temperatures must be > 0")
    need(m.sinkhorn_iters >= 1, "mcr.sinkhorn_iters must be >= 1")
    need(m.feature_queue >= 0, "mcr.feature_queue must be >= 0")
    q = cfg.queue
    need(q.inner_steps >= 0 and q.inner_batch >= 1 and q.capacity_batches >= 1, "queue.* out of range")
    c = cfg.car
    need(c.timing in ("trigger", "fixed"), "car.timing must be trigger or fixed")
    need(c.action in ("weighted", "average", "source-reset"), "car.action must be weighted, average or source-reset")
    need(c.interval >= 1 and c.top_k >= 1 and c.xi >= 1 and c.capacity >= 1, "car.interval, car.top_k, car.xi, car.capacity must be >= 1")
    det = cfg.detector
    need(det.window >= 1 and 1 <= det.min_fill, "detector.window and detector.min_fill must be >= 1")
    need(0.0 <= det.momentum < 1.0, "detector.momentum must lie in [0, 1)")
    need(det.sigma_floor > 0, "detector.sigma_floor must be > 0")
    if cfg.adapt:
        active = cfg.loss.entropy or cfg.loss.consistency or (m.enabled and bool(m.blocks))
        need(active, "at least one loss must be enabled (loss.entropy, loss.consistency or mcr with blocks)")
    return p
