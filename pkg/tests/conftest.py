import os

import numpy as np
import pytest
from hypothesis import settings

from paramalign.tensor import Rng, Tensor
from paramalign.verify import randomize_up_factors, tiny_model

settings.register_profile("default", max_examples=40, deadline=None)
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny64():
    """Tiny float64 model with nonzero up factors."""
    m = tiny_model(seed=3, dtype="float64", init_std=0.3)
    randomize_up_factors(m, Rng(5), std=0.3)
    return m


def leaf(a, dtype=np.float64):
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=True)


# lines appended by the acceptance module, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
