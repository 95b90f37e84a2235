import json
import xml.etree.ElementTree as ET

import pytest
from conftest import TINY, tiny_config

from bee import cli, experiment, report
from bee.stream import load_dataset


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text("".join(f"{k} = {v}\n" for k, v in TINY.items()))
    return str(path)


def bee(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_data_is_deterministic_and_guarded(tmp_path, cfg_file, capsys):
    assert bee("gen-data", "--config", cfg_file, "--out", tmp_path / "a") == 0
    assert bee("--config", cfg_file, "--out", tmp_path / "b", "gen-data") == 0
    for name in ("source_train.beed", "source_holdout.beed", "stream.beed", "schedule.json"):
        assert (tmp_path / "a/data" / name).read_bytes() == (tmp_path / "b/data" / name).read_bytes()
    capsys.readouterr()
    assert bee("gen-data", "--config", cfg_file, "--out", tmp_path / "a") == 2
    assert "--force" in capsys.readouterr().err
    assert bee("gen-data", "--config", cfg_file, "--out", tmp_path / "a", "--force") == 0
    stream = load_dataset(tmp_path / "a/data/stream.beed")
    assert len(stream) == 3 * 8 * 16
    assert json.loads((tmp_path / "a/data/schedule.json").read_text())["domains"] == experiment.schedule(tiny_config()).names()


def test_gen_data_seed_changes_output(tmp_path, cfg_file):
    assert bee("gen-data", "--config", cfg_file, "--out", tmp_path / "a") == 0
    assert bee("gen-data", "--config", cfg_file, "--out", tmp_path / "b", "--seed", 1) == 0
    assert (tmp_path / "a/data/stream.beed").read_bytes() != (tmp_path / "b/data/stream.beed").read_bytes()


@pytest.fixture
def staged(tmp_path, cfg_file):
    """Source and warm-up checkpoints written by their own subcommands."""
    out = tmp_path / "stage"
    assert bee("gen-data", "--config", cfg_file, "--out", out) == 0
    assert bee("train-source", "--config", cfg_file, "--out", out) == 0
    assert bee("warmup", "--config", cfg_file, "--out", out) == 0
    return out


def test_run_outputs_and_manifest(staged, cfg_file):
    assert bee("run", "--config", cfg_file, "--out", staged) == 0
    recs = report.read_metrics(staged / "metrics.jsonl")
    assert [r["step"] for r in recs] == list(range(1, 25))
    names, errs, mean = report.read_summary(staged / "summary.csv")
    expect, _ = experiment.run_experiment(tiny_config())
    assert names == expect.domain_names
    assert errs == pytest.approx(expect.domain_errors, abs=1e-4)
    assert mean == pytest.approx(expect.mean_error, abs=1e-4)

    manifest = json.loads((staged / "run.manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["mcr.blocks"] == "2,3"
    assert set(manifest["outputs"]) == {"metrics.jsonl", "summary.csv", "holdout.csv"}
    for entry in manifest["outputs"].values():
        with open(entry["path"], "rb") as fh:
            assert report.blob_hash(fh.read()) == entry["blob"]
    assert set(manifest["inputs"]) == {"config", "source.ckpt", "warmup.ckpt"}
    assert {"warmup", "adapt", "total"} <= set(manifest["timings_s"])


def test_run_refuses_overwrite_and_reruns_identically(staged, cfg_file):
    assert bee("run", "--config", cfg_file, "--out", staged) == 0
    first = (staged / "metrics.jsonl").read_bytes(), (staged / "summary.csv").read_bytes()
    first_hash = json.loads((staged / "run.manifest.json").read_text())["inputs_hash"]
    assert bee("run", "--config", cfg_file, "--out", staged) == 2
    assert bee("run", "--config", cfg_file, "--out", staged, "--force") == 0
    assert first == ((staged / "metrics.jsonl").read_bytes(), (staged / "summary.csv").read_bytes())
    assert json.loads((staged / "run.manifest.json").read_text())["inputs_hash"] == first_hash


def test_checkpoint_path_equals_auto_path(staged, tmp_path, cfg_file):
    assert bee("run", "--config", cfg_file, "--out", staged) == 0
    assert bee("run", "--config", cfg_file, "--out", tmp_path / "auto", "--auto") == 0
    assert bee("run", "--config", cfg_file, "--out", tmp_path / "fromdata", "--data", staged / "data", "--source", staged / "source.ckpt", "--warmup-ckpt", staged / "warmup.ckpt") == 0
    ref = (staged / "metrics.jsonl").read_bytes()
    assert (tmp_path / "auto/metrics.jsonl").read_bytes() == ref
    assert (tmp_path / "fromdata/metrics.jsonl").read_bytes() == ref


def test_missing_or_stale_checkpoints(tmp_path, staged, cfg_file, capsys):
    assert bee("run", "--config", cfg_file, "--out", tmp_path / "empty") == 2
    assert "train-source" in capsys.readouterr().err
    # a different consistency block set needs its own warm-up
    assert bee("run", "--config", cfg_file, "--out", staged, "--mcr-blocks", "3") == 2
    assert "stale" in capsys.readouterr().err
    assert bee("run", "--config", cfg_file, "--out", staged, "--mcr-blocks", "3", "--auto") == 0


def test_flag_validation(staged, cfg_file, capsys):
    assert bee("run", "--config", cfg_file, "--out", staged, "--no-car", "--car-strategy", "average") == 2
    assert "mutually exclusive" in capsys.readouterr().err
    assert bee("run", "--config", cfg_file, "--out", staged, "--mcr-blocks", "2,x") == 2
    assert bee("run", "--config", cfg_file, "--out", staged, "--car-strategy", "fixed:0") == 2
    assert bee("run", "--config", cfg_file, "--out", staged, "--set", "car.xi") == 2
    with pytest.raises(SystemExit):
        bee("run", "--preset", "nonsense")


def test_fixed_strategy_and_anchor_dump(staged, cfg_file):
    out = staged / "fixed"
    assert bee("run", "--config", cfg_file, "--out", out, "--source", staged / "source.ckpt", "--auto", "--car-strategy", "fixed:6", "--dump-anchors") == 0
    recs = report.read_metrics(out / "metrics.jsonl")
    assert [r["step"] for r in recs if r["merge"]] == [6, 12, 18, 24]
    for r in recs:
        if r["merge"]:
            assert sum(r["merge"]["weights"]) == pytest.approx(1.0)
    dumped = sorted(p.name for p in (out / "anchors").iterdir())
    assert dumped and all(p.startswith("anchor_") and p.endswith(".ckpt") for p in dumped)
    assert len(dumped) == recs[-1]["n_anchors"]


def test_source_only_preset_has_no_losses(staged, cfg_file):
    out = staged / "src"
    assert bee("run", "--config", cfg_file, "--out", out, "--preset", "source-only", "--source", staged / "source.ckpt", "--auto") == 0
    recs = report.read_metrics(out / "metrics.jsonl")
    assert all(r["ent_loss"] is None and not r["trigger"] and r["n_anchors"] == 0 for r in recs)


def test_plot_marks_match_triggers(staged, cfg_file, tmp_path, capsys):
    assert bee("run", "--config", cfg_file, "--out", staged) == 0
    assert bee("eval-source", "--config", cfg_file, "--out", staged) == 0
    n_trig = sum(r["trigger"] for r in report.read_metrics(staged / "metrics.jsonl"))
    capsys.readouterr()
    assert bee("plot", "--out", tmp_path / "fig", "--metrics", f"bee={staged / 'metrics.jsonl'}", "--holdout", staged / "source_holdout.csv") == 0
    assert f"{n_trig} trigger marks" in capsys.readouterr().out
    ET.parse(tmp_path / "fig/mcr_loss.svg")
    root = ET.parse(tmp_path / "fig/forgetting.svg").getroot()
    ids = {g.get("id") for g in root.iter("{http://www.w3.org/2000/svg}g")}
    assert {"series-0", "series-1"} <= ids
    series = report.read_holdout(staged / "source_holdout.csv")
    assert list(series) == ["with CAR", "without CAR"]
    assert all(len(v) == 3 for v in series.values())


def test_plot_refuses_empty_metrics(tmp_path, capsys):
    empty = tmp_path / "m.jsonl"
    empty.write_text("")
    assert bee("plot", "--out", tmp_path, "--metrics", empty) == 2
    assert "no metrics" in capsys.readouterr().err
    assert bee("plot", "--out", tmp_path) == 2


def test_ablation_row_layouts():
    rows = cli.component_rows(4, (2, 3, 4))
    assert [r["mcr_blocks"] for r in rows[:5]] == [[], [4], [3, 4], [2, 3, 4], [1, 2, 3, 4]]
    assert [(r["mcr_blocks"], r["queue"], r["car"]) for r in rows[5:]] == [([2, 3, 4], True, False), ([2, 3, 4], False, True), ([2, 3, 4], True, True)]
    replay = cli.replay_rows()
    assert len(replay) == 9
    assert [r["car_strategy"] for r in replay[1:6]] == ["fixed:40", "fixed:80", "fixed:160", "fixed:320", "fixed:640"]


def test_ablate_command(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("BEE_THREADS", "1")
    assert bee("ablate", "--config", cfg_file, "--out", tmp_path, "--seeds", "1") == 0
    comp = (tmp_path / "ablate_components.csv").read_text().splitlines()
    assert comp[0] == "no,L_ent,L_MCR3,L_MCR2,L_MCR1,queue,CAR,mean_error_pct,std_pct,seeds"
    assert len(comp) == 1 + 7
    rep = (tmp_path / "ablate_replay.csv").read_text().splitlines()
    assert len(rep) == 1 + 9
    assert [line.split(",")[2] for line in rep[2:7]] == ["40", "80", "160", "320", "640"]
    # row 1 of the component table is plain entropy minimisation
    ent, _ = experiment.run_experiment(tiny_config(mcr__enabled="false", queue__enabled="false", car__enabled="false", loss__consistency="false"))
    assert float(comp[1].split(",")[7]) == pytest.approx(ent.mean_error, abs=1e-4)


def test_bad_thread_count(tmp_path, cfg_file, monkeypatch, capsys):
    monkeypatch.setenv("BEE_THREADS", "zero")
    assert bee("ablate", "--config", cfg_file, "--out", tmp_path, "--seeds", "1", "--table", "replay") == 2
    assert "BEE_THREADS" in capsys.readouterr().err
