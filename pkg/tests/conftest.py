import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_MODULE_REPORTS = {}
MODULE_SECONDS = {}
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def module_reports():
    """Module-level gradient checks are slow; compute each once per session."""
    from mambalite import checks

    def get(name):
        if name not in _MODULE_REPORTS:
            t0 = time.perf_counter()
            _MODULE_REPORTS[name] = getattr(checks, f"check_{name}")(seed=0, tol=1e-4)
            MODULE_SECONDS[name] = time.perf_counter() - t0
        return _MODULE_REPORTS[name]

    return get


@pytest.fixture
def criterion(capsys):
    """Print one pass/fail line for an acceptance criterion and keep it for the summary."""

    def report(number, passed, detail):
        line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
