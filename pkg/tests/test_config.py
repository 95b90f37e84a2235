import pytest

from bee import config
from bee.config import Config, ConfigError


def test_defaults_round_trip_through_text():
    cfg = Config()
    back = config.from_flat(config.parse_text(config.dumps(cfg)))
    assert config.to_flat(back) == config.to_flat(cfg)


def test_provenance_defaults():
    cfg = Config()
    assert cfg.optim.lr == 1e-3
    assert cfg.queue.inner_steps == 2
    assert (cfg.car.top_k, cfg.car.xi, cfg.car.capacity) == (5, 30, 50)
    assert (cfg.detector.window, cfg.detector.threshold, cfg.detector.momentum) == (100, 1.5, 0.9)
    assert cfg.mcr.sinkhorn_iters == 3
    assert cfg.mcr.blocks == (2, 3, 4)


def test_file_with_comments_and_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# experiment\ncar.xi = 15   # more anchors\n\nmcr.blocks = 3,4\nseed = 7\n")
    cfg = config.load(path, {"seed": "9"})
    assert cfg.car.xi == 15 and cfg.mcr.blocks == (3, 4) and cfg.seed == 9


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as err:
        config.from_flat({"car.bogus": "1", "optim.lr": "fast", "mcr.prototypes": "1", "zzz": "2"})
    problems = err.value.problems
    assert len(problems) == 4
    text = str(err.value)
    assert "car.bogus" in text and "optim.lr" in text and "mcr.prototypes" in text and "zzz" in text


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigError, match="duplicate"):
        config.parse_text("a.b = 1\na.b = 2\n")
    with pytest.raises(ConfigError, match="line 1"):
        config.parse_text("no equals sign here\n")


def test_bool_and_tuple_parsing():
    cfg = config.from_flat({"queue.enabled": "false", "model.shallow": "1,2", "loss.consistency": "yes"})
    assert cfg.queue.enabled is False and cfg.model.shallow == (1, 2) and cfg.loss.consistency is True
    with pytest.raises(ConfigError):
        config.from_flat({"queue.enabled": "maybe"})


def test_no_loss_rejected():
    with pytest.raises(ConfigError, match="loss"):
        config.from_flat({"loss.entropy": "false", "mcr.enabled": "false"})


def test_copy_is_independent():
    a = Config()
    b = a.copy()
    b.car.xi = 1
    assert a.car.xi == 30
