import numpy as np
import pytest

from bdsl_spoter import kernels
from bdsl_spoter.nn.model import ModelConfig

TINY = ModelConfig(d_model=18, n_layers=1, n_heads=9, d_ff=24, T=8, n_classes=3, head_hidden=(16,))

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per kernel backend, with that backend active."""
    prev = kernels.use_backend(request.param)
    yield kernels.get_backend(request.param)
    kernels.use_backend(prev.name)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return TINY


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        for line in ACCEPTANCE_LINES[k]:
            terminalreporter.write_line(line)
