import os
import sys

import pytest
import torch
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy_run():
    """The seeded end-to-end toy experiment (ensemble, distilled student, control); ~1.5 min on one CPU."""
    from emuformer.experiments import ToySetup, run_toy
    return run_toy(ToySetup())


@pytest.fixture
def tiny_cfg():
    from emuformer.config import ModelConfig
    return ModelConfig(widths=(4, 8, 8, 8), depths=(1, 1, 1, 1), embed_dim=8, num_classes=3)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pytest_collection_modifyitems(items):
    for item in items:
        if "toy_run" in getattr(item, "fixturenames", ()):
            item.add_marker(pytest.mark.slow)
