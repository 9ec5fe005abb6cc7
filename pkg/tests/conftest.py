import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))


def gradcheck(fn, *inputs, rtol=1e-4):
    """Central finite differences vs autograd, elementwise relative tolerance ``rtol``."""
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=1e-7, rtol=rtol,
                                    nondet_tol=0.0)


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# acceptance verdict lines, echoed in the terminal summary so they survive capture
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
