import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """A small generated dataset shared by the data, training and CLI tests."""
    from drivergaze.world import WorldConfig, generate_dataset
    out = tmp_path_factory.mktemp("tiny_world")
    world = WorldConfig(n_sessions=4, samples_per_session=12, sessions_per_subject=2, rng_seed=3)
    manifest = generate_dataset(world, out)
    return world, manifest, out


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = [mod.RESULTS[k] for k in sorted(mod.RESULTS)] if mod else []
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
