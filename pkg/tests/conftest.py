import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sale_core import kernels  # noqa: E402
from sale_core.core import HeadInput  # noqa: E402


@pytest.fixture(params=kernels.BACKENDS)
def backend(request, monkeypatch):
    """Run the test once per kernel backend."""
    monkeypatch.setattr(kernels, "_active", kernels.get_backend(request.param))
    return request.param


def random_head(seed, n, d, scale=1.0):
    rng = np.random.default_rng(seed)
    return HeadInput(*(scale * rng.standard_normal((n, d)) for _ in range(3)))


@pytest.fixture
def make_head():
    return random_head



def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for num in sorted(results):
            terminalreporter.write_line(results[num])
