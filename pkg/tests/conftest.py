import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY = {
    "epochs": 1, "batch": 8, "n_clips": 20, "gtm_warmup_steps": 10, "label_dim": 8, "critic_hidden": 8,
    "model": {"channels": 8, "backbone_widths": [4, 8, 8], "gtm_hidden": 8, "lcm_blocks": 1, "head_layers": 2},
}


@pytest.fixture
def tiny():
    """Factory for a seconds-long training config; keyword arguments override."""
    from dataclasses import replace

    from tempalign.train import TrainConfig

    def make(**kw):
        return replace(TrainConfig.from_json(TINY), **kw)
    return make


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
