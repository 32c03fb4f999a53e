import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hiernet import _backend

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")



@pytest.fixture(params=_backend.available())
def backend(request):
    """Run a test once per importable kernel backend."""
    previous = _backend.kernels
    _backend.use(request.param)
    yield request.param
    _backend.kernels = previous


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def reference_realize(layers, x, delta):
    """Plain-Python layer recursion used as an independent oracle."""
    a = [float(v) for v in x]
    for i, (W, B) in enumerate(layers):
        if i > 0:
            a = [v if v >= 0 else delta * v for v in a]
        a = [sum(float(W[j, k]) * a[k] for k in range(len(a))) + float(B[j]) for j in range(W.shape[0])]
    return a[0]


ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one acceptance line: ``report(number, title, passed, detail)``."""

    def record(number, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
