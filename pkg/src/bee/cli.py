"""Command-line harness.

    bee gen-data      write source and target-stream datasets
    bee train-source  supervised source model -> source.ckpt
    bee warmup        teacher/codebook warm-up -> warmup.ckpt
    bee run           adapt online -> metrics.jsonl, summary.csv, holdout.csv
    bee ablate        component and replay-strategy ablation tables
    bee eval-source   source-holdout accuracy with and without anchor replay -> source_holdout.csv
    bee plot          SVG charts from metrics and holdout files

Global flags (--config, --seed, --out, --force, --set) are accepted before
or after the subcommand.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, config, experiment, loop, report
from .config import Config, ConfigError
from .netcore import CheckpointError, load_checkpoint, save_checkpoint
from .stream import (
    DatasetFormatError,
    batches_from_dataset,
    iter_stream,
    gen_source,
    load_dataset,
    save_dataset,
    stream_dataset,
    sub_rng,
)

log = logging.getLogger("bee")


class CLIError(RuntimeError):
    pass


# -- argument parsing ------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=d, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=d, help="root seed (unsigned 64-bit)")
    parser.add_argument("--out", metavar="DIR", default=d, help="output directory (default: current directory)")
    parser.add_argument("--force", action="store_true", default=argparse.SUPPRESS if suppress else False, help="overwrite existing outputs")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", default=d, help="override one config key (repeatable)")


def _adapt_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--preset", choices=loop.PRESETS, default="bee")
    parser.add_argument("--no-car", action="store_true", help="disable complementary anchor replay")
    parser.add_argument("--no-queue", action="store_true", help="disable the sample queue")
    parser.add_argument("--mcr-blocks", metavar="LIST", help="comma-separated blocks for the consistency loss; empty disables it")
    parser.add_argument("--car-strategy", metavar="S", help="trigger | fixed:N | source-reset | average | weighted")


def _checkpoint_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--source", metavar="PATH", help="source checkpoint (default OUT/source.ckpt)")
    parser.add_argument("--warmup-ckpt", metavar="PATH", help="warm-up checkpoint (default OUT/warmup.ckpt)")
    parser.add_argument("--auto", action="store_true", help="produce missing or stale checkpoints")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bee", description="Continual test-time adaptation on synthetic drifting streams.")
    parser.add_argument("--version", action="version", version=f"bee {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        return p

    p = add("gen-data", "write source train/holdout and the target stream as BEED files")
    p.add_argument("--domains", type=int, help="number of target domains")

    p = add("train-source", "train the source model")
    p.add_argument("--data", metavar="DIR", help="read source data written by gen-data")

    p = add("warmup", "warm up teacher, shallow blocks and codebooks on source data")
    _adapt_flags(p)
    p.add_argument("--source", metavar="PATH", help="source checkpoint (default OUT/source.ckpt)")
    p.add_argument("--auto", action="store_true", help="train the source model if missing")

    p = add("run", "adapt online over the target stream")
    _adapt_flags(p)
    _checkpoint_flags(p)
    p.add_argument("--data", metavar="DIR", help="read the target stream written by gen-data")
    p.add_argument("--dump-anchors", action="store_true", help="write the final anchor pool as checkpoints")

    p = add("ablate", "component and replay-strategy ablation tables")
    p.add_argument("--table", choices=("components", "replay", "all"), default="all")
    p.add_argument("--seeds", type=int, default=5, help="number of consecutive seeds starting at --seed")

    p = add("eval-source", "source-holdout accuracy per domain boundary, with and without anchor replay")
    _adapt_flags(p)

    p = add("plot", "render SVG charts")
    p.add_argument("--metrics", action="append", default=[], metavar="[LABEL=]PATH", help="metrics JSONL (repeatable)")
    p.add_argument("--holdout", metavar="PATH", help="holdout CSV from run or eval-source")
    return parser


# -- shared helpers ----------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise CLIError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def _base_config(args) -> Config:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CLIError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise CLIError("--seed must be an unsigned 64-bit integer")
        overrides["seed"] = str(args.seed)
    return config.load(args.config, overrides)


def _adapt_config(args, base: Config | None = None) -> Config:
    cfg = base or _base_config(args)
    if args.no_car and args.car_strategy:
        raise CLIError("--no-car and --car-strategy are mutually exclusive")
    blocks = None
    if args.mcr_blocks is not None:
        try:
            blocks = [int(b) for b in args.mcr_blocks.split(",") if b.strip()]
        except ValueError:
            raise CLIError(f"--mcr-blocks expects a comma-separated list of integers, got {args.mcr_blocks!r}") from None
    return loop.configure_ablation(
        cfg,
        preset=args.preset,
        mcr_blocks=blocks,
        queue=False if args.no_queue else None,
        car=False if args.no_car else None,
        car_strategy=args.car_strategy,
    )


def _manifest(out: Path, command: str, cfg: Config | None, inputs: dict[str, bytes], outputs: list[Path], timings: dict) -> Path:
    path = out / f"{command}.manifest.json"
    manifest = {
        "command": command,
        "version": __version__,
        "seed": None if cfg is None else cfg.seed,
        "config": None if cfg is None else config.to_flat(cfg),
        "inputs": {name: report.blob_hash(data) for name, data in sorted(inputs.items())},
        "inputs_hash": report.inputs_hash(inputs),
        "outputs": {p.name: {"path": str(p), "blob": report.blob_hash(p.read_bytes())} for p in outputs if p.is_file()},
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
    }
    report.write_manifest(path, manifest)
    return path


def _source_meta(cfg: Config) -> dict:
    return {"key": [list(kv) for kv in experiment._source_key(cfg)]}


def _load_source(args, cfg: Config, out: Path):
    """Source parameters from the checkpoint, training them first when allowed."""
    path = Path(args.source) if getattr(args, "source", None) else out / "source.ckpt"
    meta_path = path.with_suffix(".json")
    want = _source_meta(cfg)
    if path.exists() and meta_path.exists() and json.loads(meta_path.read_text()) == want:
        return load_checkpoint(path), path
    if path.exists() and not meta_path.exists():
        return load_checkpoint(path), path
    if not getattr(args, "auto", False):
        why = "missing" if not path.exists() else "trained under different settings"
        raise CLIError(f"source checkpoint {path} is {why}; run train-source first or pass --auto")
    bundle = experiment.prepare_source(cfg)
    save_checkpoint(bundle.params, path)
    meta_path.write_text(json.dumps(want) + "\n")
    return bundle.params, path


def _warmup_fingerprint(cfg: Config, source_blob: str) -> dict:
    flat = config.to_flat(cfg)
    keep = ("seed", "adapt", "data.", "model.", "source.", "warmup.", "optim.", "loss.", "mcr.", "car.enabled", "car.timing")
    return {"source": source_blob, "config": {k: v for k, v in flat.items() if k.startswith(keep)}}


def _warm_state(args, cfg: Config, out: Path):
    net = loop.build_network(cfg)
    params, source_path = _load_source(args, cfg, out)
    net.check_params(params)
    path = Path(args.warmup_ckpt) if getattr(args, "warmup_ckpt", None) else out / "warmup.ckpt"
    meta_path = path.with_suffix(".json")
    want = _warmup_fingerprint(cfg, report.blob_hash(source_path.read_bytes()))
    if path.exists() and meta_path.exists() and json.loads(meta_path.read_text()) == want:
        return loop.restore_state(cfg, net, load_checkpoint(path)), {"source.ckpt": source_path.read_bytes(), "warmup.ckpt": path.read_bytes()}
    if not args.auto:
        why = "missing" if not path.exists() else "stale for these settings"
        raise CLIError(f"warm-up checkpoint {path} is {why}; run warmup with the same flags first or pass --auto")
    bundle = experiment.prepare_source(cfg)
    state = loop.warmup(cfg, net, params, bundle.train)
    save_checkpoint(loop.state_tensors(state), path)
    meta_path.write_text(json.dumps(want) + "\n")
    # reload so both paths start from identical bytes
    state = loop.restore_state(cfg, net, load_checkpoint(path))
    return state, {"source.ckpt": source_path.read_bytes(), "warmup.ckpt": path.read_bytes()}


def _threads() -> int:
    raw = os.environ.get("BEE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CLIError(f"BEE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CLIError(f"BEE_THREADS must be a positive integer, got {raw!r}")
    return n


# -- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    base = _base_config(args)
    if args.domains is not None:
        base = config.from_flat({**config.to_flat(base), "data.domains": str(args.domains)})
    out = _out_dir(args) / "data"
    out.mkdir(parents=True, exist_ok=True)
    files = [out / n for n in ("source_train.beed", "source_holdout.beed", "stream.beed", "schedule.json")]
    _guard(files, args.force)
    t0 = time.perf_counter()
    train, holdout = gen_source(experiment.source_task(base))
    sched = experiment.schedule(base)
    save_dataset(train, files[0])
    save_dataset(holdout, files[1])
    save_dataset(stream_dataset(sched), files[2])
    names = sched.names()
    files[3].write_text(json.dumps({"domains": names, "batch_size": base.data.batch_size}, indent=2) + "\n")
    _manifest(out, "gen-data", base, {"config": config.dumps(base).encode()}, files, {"total": time.perf_counter() - t0})
    print(f"{len(names)} domains, {base.data.batches_per_domain} batches x {base.data.batch_size} samples each")
    for name in names:
        print(f"  {name}")
    return 0


def cmd_train_source(args) -> int:
    cfg = _base_config(args)
    out = _out_dir(args)
    path = out / "source.ckpt"
    _guard([path], args.force)
    t0 = time.perf_counter()
    if args.data:
        train = load_dataset(Path(args.data) / "source_train.beed")
        holdout = load_dataset(Path(args.data) / "source_holdout.beed")
        net = loop.build_network(cfg)
        init = net.init_params(sub_rng(cfg.seed, "init"))
        params = loop.train_source(net, init, train, cfg.source.epochs, cfg.source.batch_size, cfg.source.lr, cfg.seed)
        acc = loop.accuracy(net, params, holdout)
    else:
        bundle = experiment.prepare_source(cfg)
        params, acc = bundle.params, bundle.holdout_acc
    save_checkpoint(params, path)
    path.with_suffix(".json").write_text(json.dumps(_source_meta(cfg)) + "\n")
    _manifest(out, "train-source", cfg, {"config": config.dumps(cfg).encode()}, [path, path.with_suffix(".json")], {"total": time.perf_counter() - t0})
    print(f"source holdout accuracy {100 * acc:.2f}%  -> {path}")
    return 0


def cmd_warmup(args) -> int:
    cfg = _adapt_config(args)
    out = _out_dir(args)
    path = out / "warmup.ckpt"
    _guard([path], args.force)
    t0 = time.perf_counter()
    net = loop.build_network(cfg)
    params, source_path = _load_source(args, cfg, out)
    bundle = experiment.prepare_source(cfg)
    state = loop.warmup(cfg, net, params, bundle.train)
    save_checkpoint(loop.state_tensors(state), path)
    meta = _warmup_fingerprint(cfg, report.blob_hash(source_path.read_bytes()))
    path.with_suffix(".json").write_text(json.dumps(meta) + "\n")
    inputs = {"config": config.dumps(cfg).encode(), "source.ckpt": source_path.read_bytes()}
    _manifest(out, "warmup", cfg, inputs, [path, path.with_suffix(".json")], {"total": time.perf_counter() - t0})
    print(f"warm-up done: {len(state.cb_student)} codebooks -> {path}")
    return 0


def _stream_batches(args, cfg: Config):
    if args.data:
        data_dir = Path(args.data)
        ds = load_dataset(data_dir / "stream.beed")
        meta = json.loads((data_dir / "schedule.json").read_text())
        return list(batches_from_dataset(ds, int(meta["batch_size"]))), meta["domains"], {"stream.beed": (data_dir / "stream.beed").read_bytes()}
    sched = experiment.schedule(cfg)
    return list(iter_stream(sched)), sched.names(), {}


def cmd_run(args) -> int:
    cfg = _adapt_config(args)
    out = _out_dir(args)
    outputs = [out / "metrics.jsonl", out / "summary.csv", out / "holdout.csv"]
    _guard(outputs, args.force)
    t0 = time.perf_counter()
    state, ckpt_inputs = _warm_state(args, cfg, out)
    t_warm = time.perf_counter()
    batches, names, data_inputs = _stream_batches(args, cfg)
    holdout = experiment.prepare_source(cfg).holdout
    result = loop.run(state, batches, names, holdout=holdout)
    t_run = time.perf_counter()
    report.write_metrics(outputs[0], result.reports)
    report.write_summary(outputs[1], result.domain_names, result.domain_errors)
    report.write_table(
        outputs[2],
        report.HOLDOUT_FIELDS,
        [[args.preset, i + 1, n, f"{a:.6f}"] for i, (n, a) in enumerate(zip(result.domain_names, result.holdout_acc))],
    )
    if args.dump_anchors:
        adir = out / "anchors"
        adir.mkdir(exist_ok=True)
        for anchor in state.pool:
            p = adir / f"anchor_{anchor.step:06d}.ckpt"
            save_checkpoint(anchor.params, p)
            outputs.append(p)
    inputs = {"config": config.dumps(cfg).encode(), **ckpt_inputs, **data_inputs}
    _manifest(out, "run", cfg, inputs, outputs, {"warmup": t_warm - t0, "adapt": t_run - t_warm, "total": time.perf_counter() - t0})
    for n, e in zip(result.domain_names, result.domain_errors):
        print(f"{n:24s} {e:7.2f}")
    print(f"{'mean':24s} {result.mean_error:7.2f}")
    return 0


# -- ablations ---------------------------------------------------------------------------

REPLAY_HEADER = ["no", "mcr_trigger", "fixed_interval", "theta0", "averaging", "weighted_merging", "mean_error_pct", "std_pct", "seeds"]
FIXED_INTERVALS = (40, 80, 160, 320, 640)


def component_rows(n_blocks: int, best: tuple[int, ...]) -> list[dict]:
    """Rows in the layout of the component ablation table.

    Consistency blocks are added deepest first; the queue and replay rows
    build on ``best``.
    """
    deep = list(range(n_blocks, 0, -1))
    best = sorted(best)
    rows = [{"mcr_blocks": []}]
    for k in range(1, n_blocks + 1):
        rows.append({"mcr_blocks": sorted(deep[:k])})
    rows.append({"mcr_blocks": best, "queue": True})
    rows.append({"mcr_blocks": best, "car": True})
    rows.append({"mcr_blocks": best, "queue": True, "car": True})
    for r in rows:
        r.setdefault("queue", False)
        r.setdefault("car", False)
    return rows


def replay_rows() -> list[dict]:
    rows = [{"car": False}]
    rows += [{"car_strategy": f"fixed:{n}"} for n in FIXED_INTERVALS]
    rows += [{"car_strategy": "weighted"}, {"car_strategy": "source-reset"}, {"car_strategy": "average"}]
    return rows


def _row_config(base: Config, table: str, row: dict) -> Config:
    if table == "components":
        return loop.configure_ablation(base, preset="bee", entropy=True, mcr_blocks=row["mcr_blocks"], queue=row["queue"], car=row["car"])
    cfg = loop.configure_ablation(base, preset="bee", queue=True)
    if "car_strategy" in row:
        return loop.configure_ablation(cfg, car_strategy=row["car_strategy"])
    return loop.configure_ablation(cfg, car=False)


def _ablation_job(job) -> tuple:
    key, flat = job
    cfg = config.from_flat(flat)
    result, _ = experiment.run_experiment(cfg)
    return key, result.mean_error


def _run_jobs(jobs, threads: int) -> dict:
    if threads <= 1 or len(jobs) <= 1:
        return dict(_ablation_job(j) for j in jobs)
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
        return dict(pool.map(_ablation_job, jobs))


def cmd_ablate(args) -> int:
    base = _base_config(args)
    out = _out_dir(args)
    tables = ("components", "replay") if args.table == "all" else (args.table,)
    paths = {t: out / f"ablate_{t}.csv" for t in tables}
    _guard(paths.values(), args.force)
    if args.seeds < 1:
        raise CLIError("--seeds must be >= 1")
    t0 = time.perf_counter()
    seeds = [base.seed + i for i in range(args.seeds)]
    n_blocks = len(base.model.widths)
    layouts = {"components": component_rows(n_blocks, base.mcr.blocks or (n_blocks,)), "replay": replay_rows()}
    jobs = []
    for t in tables:
        for i, row in enumerate(layouts[t]):
            cfg = _row_config(base, t, row)
            for s in seeds:
                flat = config.to_flat(cfg)
                flat["seed"] = str(s)
                jobs.append(((t, i, s), flat))
    results = _run_jobs(jobs, _threads())
    for t in tables:
        rows = []
        for i, row in enumerate(layouts[t]):
            errs = np.array([results[(t, i, s)] for s in seeds])
            stats = [f"{errs.mean():.4f}", f"{errs.std():.4f}", len(seeds)]
            if t == "components":
                marks = ["x" if j in row["mcr_blocks"] else "" for j in range(n_blocks, 0, -1)]
                rows.append([i + 1, "x", *marks, "x" if row["queue"] else "", "x" if row["car"] else "", *stats])
            else:
                strat = row.get("car_strategy")
                fixed = strat.split(":")[1] if strat and strat.startswith("fixed:") else ""
                trig = "x" if strat in ("weighted", "source-reset", "average") else ""
                rows.append(
                    [
                        i + 1,
                        trig,
                        fixed,
                        "x" if strat == "source-reset" else "",
                        "x" if strat == "average" else "",
                        "x" if strat == "weighted" or fixed else "",
                        *stats,
                    ]
                )
        if t == "components":
            header = ["no", "L_ent"] + [f"L_MCR{j}" for j in range(n_blocks, 0, -1)] + ["queue", "CAR", "mean_error_pct", "std_pct", "seeds"]
        else:
            header = REPLAY_HEADER
        report.write_table(paths[t], header, rows)
        print(f"{t}: {len(rows)} rows -> {paths[t]}")
    _manifest(out, "ablate", base, {"config": config.dumps(base).encode()}, list(paths.values()), {"total": time.perf_counter() - t0})
    return 0


def cmd_eval_source(args) -> int:
    cfg = _adapt_config(args)
    out = _out_dir(args)
    path = out / "source_holdout.csv"
    _guard([path], args.force)
    t0 = time.perf_counter()
    runs = {"with CAR": cfg if cfg.car.enabled else loop.configure_ablation(cfg, car=True), "without CAR": loop.configure_ablation(cfg, car=False)}
    rows = []
    for label, c in runs.items():
        result, _ = experiment.run_experiment(c, eval_holdout=True)
        for i, (n, a) in enumerate(zip(result.domain_names, result.holdout_acc)):
            rows.append([label, i + 1, n, f"{a:.6f}"])
            print(f"{label:12s} {n:24s} {100 * a:6.2f}")
    report.write_table(path, report.HOLDOUT_FIELDS, rows)
    _manifest(out, "eval-source", cfg, {"config": config.dumps(cfg).encode()}, [path], {"total": time.perf_counter() - t0})
    return 0


def cmd_plot(args) -> int:
    if not args.metrics and not args.holdout:
        raise CLIError("plot needs --metrics and/or --holdout")
    out = _out_dir(args)
    outputs, inputs = [], {}
    if args.metrics:
        runs = {}
        for item in args.metrics:
            label, sep, path = item.partition("=")
            if not sep:
                label, path = Path(item).parent.name or Path(item).stem, item
            runs[label] = report.read_metrics(path)
            inputs[f"metrics:{label}"] = Path(path).read_bytes()
        target = out / "mcr_loss.svg"
        _guard([target], args.force)
        marks = report.plot_mcr_loss(runs, target)
        outputs.append(target)
        print(f"{target}: {marks} trigger marks")
    if args.holdout:
        series = report.read_holdout(args.holdout)
        inputs["holdout"] = Path(args.holdout).read_bytes()
        target = out / "forgetting.svg"
        _guard([target], args.force)
        report.plot_holdout(series, target)
        outputs.append(target)
        print(f"{target}: {len(series)} series")
    _manifest(out, "plot", None, inputs, outputs, {})
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-source": cmd_train_source,
    "warmup": cmd_warmup,
    "run": cmd_run,
    "ablate": cmd_ablate,
    "eval-source": cmd_eval_source,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (CLIError, ConfigError, report.ReportError, CheckpointError, DatasetFormatError, loop.AdaptationError, FileNotFoundError) as exc:
        print(f"bee: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
