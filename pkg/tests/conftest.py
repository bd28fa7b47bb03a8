import numpy as np
import pytest
import torch

from faig import degrade as dg
from faig import model as m
from faig.train import TrainConfig, finetune_target, train_baseline

TINY_SPEC = m.ModelSpec(channels=4, num_blocks=1)


@pytest.fixture(scope="session")
def tiny_data():
    return dg.procedural_dataset(6, 48, seed=11)


@pytest.fixture(scope="session")
def tiny_pair(tiny_data):
    """A briefly trained (baseline, target) pair on a 4-channel single-block network."""
    base_cfg = TrainConfig(iterations=60, batch_size=4, patch_size=32, lr=2e-3, policy="bicubic", seed=0)
    tune_cfg = TrainConfig(iterations=60, batch_size=4, patch_size=32, lr=1e-3, policy="blind", seed=0)
    baseline = train_baseline(TINY_SPEC, tiny_data, base_cfg)
    target = finetune_target(baseline, tiny_data, tune_cfg)
    return baseline, target


@pytest.fixture(scope="session")
def tiny_pair64(tiny_pair):
    return tuple(p.to(torch.float64) for p in tiny_pair)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# Acceptance verdict lines, collected by tests/test_acceptance.py and echoed at the end of the session.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
