import sys

import pytest

from bee.config import from_flat

TINY = {
    "data.dim": "16",
    "data.center_scale": "2.0",
    "data.n_classes": "4",
    "data.n_train": "400",
    "data.n_holdout": "200",
    "data.domains": "3",
    "data.batches_per_domain": "8",
    "data.batch_size": "16",
    "model.widths": "12,12,12",
    "source.epochs": "3",
    "source.batch_size": "32",
    "warmup.epochs": "0.25",
    "mcr.blocks": "2,3",
    "mcr.prototypes": "8",
    "mcr.feature_queue": "32",
    "queue.inner_batch": "16",
    "queue.capacity_batches": "3",
    "car.xi": "3",
    "car.capacity": "5",
    "car.interval": "6",
    "detector.window": "20",
    "detector.min_fill": "5",
}


def tiny_config(**overrides):
    flat = dict(TINY)
    flat.update({k.replace("__", "."): str(v) for k, v in overrides.items()})
    return from_flat(flat)


@pytest.fixture
def tiny():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
