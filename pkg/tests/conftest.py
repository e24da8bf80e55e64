from __future__ import annotations

import numpy as np
import pytest
import torch

from lmsd.schema import synth_schema
from lmsd.synth import SynthSpec, synth_generate

# Populated by tests/test_acceptance.py; one line per criterion, shown in the
# terminal summary so the verdicts are visible even when output is captured.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _single_thread_torch():
    # keeps timings stable and avoids oversubscription under pytest-xdist-like load
    torch.set_num_threads(max(1, torch.get_num_threads()))
    yield


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small but non-trivial labeled corpus: 18 healthy + 3 x 4 faults."""
    spec = SynthSpec(
        n_healthy=18,
        fault_counts=(4, 4, 4),
        length=96,
        n_channels=6,
        seed=77,
        echo_lag=8,
    )
    return synth_generate(spec)


@pytest.fixture(scope="session")
def tiny_schema():
    return synth_schema(6)
