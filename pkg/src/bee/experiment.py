"""End-to-end pipeline: data, source model, warm-up, adaptation run."""

from __future__ import annotations

from dataclasses import dataclass

from . import loop
from .config import Config, to_flat
from .netcore import Network, ParamSet
from .stream import Dataset, DomainSchedule, SourceTask, default_schedule, gen_source, iter_stream, sub_rng


def source_task(cfg: Config) -> SourceTask:
    d = cfg.data
    return SourceTask(d.dim, d.n_classes, d.sigma0, d.center_scale, d.n_train, d.n_holdout, cfg.seed)


def schedule(cfg: Config) -> DomainSchedule:
    d = cfg.data
    return default_schedule(source_task(cfg), cfg.seed, d.domains, d.batches_per_domain, d.batch_size)


@dataclass
class SourceBundle:
    net: Network
    init: ParamSet
    params: ParamSet
    train: Dataset
    holdout: Dataset
    holdout_acc: float


def _source_key(cfg: Config) -> tuple:
    flat = to_flat(cfg)
    return tuple(sorted((k, v) for k, v in flat.items() if k.split(".")[0] in ("seed", "data", "model", "source")))


_SOURCE_CACHE: dict[tuple, SourceBundle] = {}
_CACHE_SIZE = 8


def prepare_source(cfg: Config) -> SourceBundle:
    """Source data and trained source model; memoised per (seed, data, model, source) settings."""
    key = _source_key(cfg)
    if key in _SOURCE_CACHE:
        return _SOURCE_CACHE[key]
    net = loop.build_network(cfg)
    init = net.init_params(sub_rng(cfg.seed, "init"))
    train, holdout = gen_source(source_task(cfg))
    params = loop.train_source(net, init, train, cfg.source.epochs, cfg.source.batch_size, cfg.source.lr, cfg.seed)
    bundle = SourceBundle(net, init, params, train, holdout, loop.accuracy(net, params, holdout))
    if len(_SOURCE_CACHE) >= _CACHE_SIZE:
        _SOURCE_CACHE.pop(next(iter(_SOURCE_CACHE)))
    _SOURCE_CACHE[key] = bundle
    return bundle


def run_experiment(cfg: Config, keep_predictions: bool = False, eval_holdout: bool = False) -> tuple[loop.RunResult, SourceBundle]:
    bundle = prepare_source(cfg)
    state = loop.warmup(cfg, bundle.net, bundle.params, bundle.train)
    sched = schedule(cfg)
    result = loop.run(
        state,
        iter_stream(sched),
        sched.names(),
        holdout=bundle.holdout if eval_holdout else None,
        keep_predictions=keep_predictions,
    )
    return result, bundle
