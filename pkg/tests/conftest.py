import numpy as np
import pytest
import torch

from paramtalk.denoiser import Denoiser
from paramtalk.types import SubspacePartition

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def small_partition():
    return SubspacePartition(n_dims=10, lip=(1, 4, 7), eye=(2, 8))


@pytest.fixture
def small_model(small_partition):
    torch.manual_seed(0)
    return Denoiser(small_partition, audio_dim=4, d_model=12, n_heads=2, local_window=3, max_distance=4).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
