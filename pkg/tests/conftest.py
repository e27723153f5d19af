import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kvevict.toymodel import ModelConfig, init_random_model, prefill, random_inputs

settings.register_profile(
    "kvevict", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("kvevict")


def make_prefill(
    layers=2, heads=4, kv_heads=2, dh=4, tokens=16, window=3, vocab=8, seed=0, scale=1.0, full=False
):
    cfg = ModelConfig(layers, heads, kv_heads, dh, window, vocab, seed)
    return prefill(cfg, init_random_model(cfg), random_inputs(cfg, tokens, scale), full)


@pytest.fixture
def small_prefill():
    return make_prefill()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(':'))):
            terminalreporter.write_line(line)
