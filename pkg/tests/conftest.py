import sys

import numpy as np
import pytest

from dfcn import kernels

BACKENDS = ["numpy"]
try:
    kernels.get_backend("cython")
    BACKENDS.insert(0, "cython")
except ImportError:  # extension not built
    pass


@pytest.fixture(params=BACKENDS)
def backend(request, monkeypatch):
    """Route every kernel call through one backend for the duration of a test."""
    monkeypatch.setattr(kernels, "_impl", kernels.get_backend(request.param))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    test_acceptance = sys.modules.get("test_acceptance")
    if test_acceptance is not None and test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.summary_lines():
            terminalreporter.write_line(line)
