import os

import pytest
from hypothesis import settings

from dgm.config import load_config

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

TINY = ["model.g_hidden=6,6", "model.d_hidden=8", "model.z_dim=2", "data.num_tasks=3",
        "data.samples_per_class=20", "schedule.epochs=2", "schedule.steps_per_epoch=3",
        "schedule.batch_size=8", "losses.n_critic=2", "masks.lr_embedding=0.05"]


@pytest.fixture
def tiny_config():
    """Factory for a seconds-long toy run; extra overrides win."""
    def make(*overrides, seed=0):
        return load_config(overrides=TINY + list(overrides), seed=seed)
    return make


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
