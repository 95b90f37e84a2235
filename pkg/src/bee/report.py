"""Run artifacts: metrics lines, summary tables, manifests and SVG charts."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

METRICS_FIELDS = ("step", "domain_id", "batch_error_pct", "mcr_loss", "ent_loss", "trigger", "merge", "n_anchors")
SUMMARY_FIELDS = ("domain_name", "error_pct")
HOLDOUT_FIELDS = ("run", "boundary", "domain_name", "holdout_acc")
MEAN_ROW = "mean"


class ReportError(ValueError):
    pass


# -- metrics -------------------------------------------------------------------


def metrics_record(report) -> dict:
    merge = None
    if report.merge is not None:
        merge = {"anchors": [int(a) for a in report.merge["anchors"]], "weights": [float(w) for w in report.merge["weights"]]}
    return {
        "step": int(report.step),
        "domain_id": None if report.domain_id is None else int(report.domain_id),
        "batch_error_pct": report.batch_error_pct,
        "mcr_loss": report.mcr_loss,
        "ent_loss": report.ent_loss,
        "trigger": bool(report.trigger),
        "merge": merge,
        "n_anchors": int(report.n_anchors),
    }


def write_metrics(path, reports) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(metrics_record(r), sort_keys=False) + "\n")


def read_metrics(path) -> list[dict]:
    records = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ReportError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
        missing = [k for k in METRICS_FIELDS if k not in rec]
        if missing:
            raise ReportError(f"{path}:{lineno}: missing fields {missing}")
        records.append(rec)
    if not records:
        raise ReportError(f"{path}: no metrics records")
    return records


# -- tables --------------------------------------------------------------------


def write_summary(path, names, errors) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for name, err in zip(names, errors):
            w.writerow([name, f"{err:.4f}"])
        w.writerow([MEAN_ROW, f"{sum(errors) / len(errors):.4f}"])


def read_summary(path) -> tuple[list[str], list[float], float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != SUMMARY_FIELDS:
        raise ReportError(f"{path}: expected header {SUMMARY_FIELDS}")
    body = rows[1:]
    if not body or body[-1][0] != MEAN_ROW:
        raise ReportError(f"{path}: last row must be the {MEAN_ROW!r} row")
    return [r[0] for r in body[:-1]], [float(r[1]) for r in body[:-1]], float(body[-1][1])


def write_table(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def read_holdout(path) -> dict[str, list[tuple[str, float]]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HOLDOUT_FIELDS:
            raise ReportError(f"{path}: expected header {HOLDOUT_FIELDS}")
        series: dict[str, list[tuple[str, float]]] = {}
        for row in reader:
            series.setdefault(row["run"], []).append((row["domain_name"], float(row["holdout_acc"])))
    if not series:
        raise ReportError(f"{path}: no holdout rows")
    return series


# -- hashing -------------------------------------------------------------------


def blob_hash(data: bytes) -> str:
    """git blob id of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(named_blobs: dict[str, bytes]) -> str:
    """Tree-style hash: sha1 over sorted ``name blob-id`` lines."""
    lines = "".join(f"{name} {blob_hash(data)}\n" for name, data in sorted(named_blobs.items()))
    return hashlib.sha1(lines.encode()).hexdigest()


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- charts --------------------------------------------------------------------

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "bee",
    "svg.fonttype": "none",
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_mcr_loss(runs: dict[str, list[dict]], path) -> int:
    """Consistency loss against step, with a marker at every trigger.

    Returns the number of trigger marks drawn. Each run's marks live in an
    SVG group with id ``triggers-<i>``.
    """
    if not runs:
        raise ReportError("nothing to plot")
    n_marks = 0
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        for i, (label, recs) in enumerate(runs.items()):
            pts = [(r["step"], r["mcr_loss"]) for r in recs if r["mcr_loss"] is not None and math.isfinite(r["mcr_loss"])]
            if pts:
                xs, ys = zip(*pts)
                (line,) = ax.plot(xs, ys, lw=0.9, label=label, gid=f"loss-{i}")
                color = line.get_color()
            else:
                color = f"C{i}"
            loss_at = dict(pts)
            trig = [r["step"] for r in recs if r["trigger"]]
            if trig:
                y0 = min(loss_at.values()) if loss_at else 0.0
                ty = [loss_at.get(s, y0) for s in trig]
                ax.plot(trig, ty, ls="none", marker="v", ms=6, color=color, gid=f"triggers-{i}", label=f"{label} trigger")
            n_marks += len(trig)
        ax.set_xlabel("step")
        ax.set_ylabel("consistency loss (nats)")
        ax.legend(frameon=False, fontsize=7)
        _save(fig, path)
    return n_marks


def plot_holdout(series: dict[str, list[tuple[str, float]]], path) -> None:
    """Source-holdout accuracy at each domain boundary, one line per run."""
    if not series:
        raise ReportError("nothing to plot")
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        names = None
        for i, (label, pts) in enumerate(series.items()):
            names = [n for n, _ in pts]
            ax.plot(range(1, len(pts) + 1), [100.0 * a for _, a in pts], marker="o", ms=3, lw=1.0, label=label, gid=f"series-{i}")
        ax.set_xticks(range(1, len(names) + 1))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=7)
        ax.set_xlabel("end of domain")
        ax.set_ylabel("source holdout accuracy (%)")
        ax.legend(frameon=False)
        _save(fig, path)
