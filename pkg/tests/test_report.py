import json
import xml.etree.ElementTree as ET

import pytest

from bee import report
from bee.loop import StepReport

SVG = "{http://www.w3.org/2000/svg}"


def _reports():
    out = []
    for step in range(1, 31):
        trig = step in (9, 21)
        merge = {"anchors": [3, 6], "weights": [0.25, 0.75], "action": "weighted"} if trig else None
        out.append(StepReport(step, 1.0 + 0.01 * step, 0.5, trig, step // 3, merge, 12.5, step // 10))
    return out


def test_metrics_schema_golden(tmp_path):
    path = tmp_path / "m.jsonl"
    report.write_metrics(path, _reports())
    lines = path.read_text().splitlines()
    assert len(lines) == 30
    first = json.loads(lines[0])
    assert tuple(first) == report.METRICS_FIELDS
    assert first == {
        "step": 1,
        "domain_id": 0,
        "batch_error_pct": 12.5,
        "mcr_loss": 1.01,
        "ent_loss": 0.5,
        "trigger": False,
        "merge": None,
        "n_anchors": 0,
    }
    merged = json.loads(lines[8])
    assert merged["trigger"] is True
    assert merged["merge"] == {"anchors": [3, 6], "weights": [0.25, 0.75]}
    assert len(report.read_metrics(path)) == 30


def test_read_metrics_rejects_bad_input(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    with pytest.raises(report.ReportError, match="no metrics"):
        report.read_metrics(empty)
    partial = tmp_path / "p.jsonl"
    partial.write_text('{"step": 1}\n')
    with pytest.raises(report.ReportError, match="missing fields"):
        report.read_metrics(partial)
    garbage = tmp_path / "g.jsonl"
    garbage.write_text("{not json\n")
    with pytest.raises(report.ReportError, match=":1:"):
        report.read_metrics(garbage)


def test_summary_schema_golden(tmp_path):
    path = tmp_path / "s.csv"
    report.write_summary(path, ["0:rotation-5", "1:scaling-5"], [10.0, 20.5])
    assert path.read_bytes() == b"domain_name,error_pct\n0:rotation-5,10.0000\n1:scaling-5,20.5000\nmean,15.2500\n"
    names, errs, mean = report.read_summary(path)
    assert names == ["0:rotation-5", "1:scaling-5"] and errs == [10.0, 20.5] and mean == 15.25


def test_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert report.blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert report.inputs_hash({"a": b"1", "b": b"2"}) == report.inputs_hash({"b": b"2", "a": b"1"})
    assert report.inputs_hash({"a": b"1"}) != report.inputs_hash({"a": b"2"})


def _group(root, gid):
    return [g for g in root.iter(f"{SVG}g") if g.get("id") == gid]


def test_mcr_plot_marks_every_trigger(tmp_path):
    recs = [report.metrics_record(r) for r in _reports()]
    other = [dict(r, trigger=r["step"] == 15) for r in recs]
    path = tmp_path / "mcr.svg"
    n = report.plot_mcr_loss({"a": recs, "b": other}, path)
    assert n == sum(r["trigger"] for r in recs) + sum(r["trigger"] for r in other) == 3
    root = ET.parse(path).getroot()
    assert root.tag == f"{SVG}svg"
    for i, expect in enumerate((2, 1)):
        (group,) = _group(root, f"triggers-{i}")
        assert len(list(group.iter(f"{SVG}use"))) == expect
        assert len(_group(root, f"loss-{i}")) == 1


def test_plots_are_deterministic(tmp_path):
    recs = [report.metrics_record(r) for r in _reports()]
    report.plot_mcr_loss({"a": recs}, tmp_path / "1.svg")
    report.plot_mcr_loss({"a": recs}, tmp_path / "2.svg")
    assert (tmp_path / "1.svg").read_bytes() == (tmp_path / "2.svg").read_bytes()


def test_holdout_plot_two_series(tmp_path):
    csv_path = tmp_path / "h.csv"
    rows = [[run, i + 1, f"d{i}", 0.9 - 0.01 * i * (run == "without CAR")] for run in ("with CAR", "without CAR") for i in range(4)]
    report.write_table(csv_path, report.HOLDOUT_FIELDS, rows)
    series = report.read_holdout(csv_path)
    assert list(series) == ["with CAR", "without CAR"]
    path = tmp_path / "h.svg"
    report.plot_holdout(series, path)
    root = ET.parse(path).getroot()
    assert len(_group(root, "series-0")) == 1 and len(_group(root, "series-1")) == 1
    texts = "".join(t.text or "" for t in root.iter(f"{SVG}text"))
    assert "with CAR" in texts and "without CAR" in texts


def test_empty_plots_refused(tmp_path):
    with pytest.raises(report.ReportError):
        report.plot_mcr_loss({}, tmp_path / "x.svg")
    with pytest.raises(report.ReportError):
        report.plot_holdout({}, tmp_path / "x.svg")
