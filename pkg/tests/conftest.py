import numpy as np
import pytest
import torch

torch.set_num_threads(1)

# acceptance verdicts, repeated in the terminal summary so they survive output capture
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_homography(rng: np.random.Generator, size: float = 128.0, strength: float = 0.1) -> np.ndarray:
    """A well-conditioned projective matrix in pixel units (h33 = 1)."""
    a = np.eye(3)
    a[:2, :2] += rng.uniform(-strength, strength, (2, 2))
    a[:2, 2] = rng.uniform(-strength, strength, 2) * size
    a[2, :2] = rng.uniform(-strength, strength, 2) / size
    return a


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
