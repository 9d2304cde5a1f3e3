import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from active_recon.geometry import CameraIntrinsics

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def intr():
    return CameraIntrinsics.from_fov(96, 72, 90.0, 60.0, near=0.05, far=8.0)


@pytest.fixture
def small_intr():
    return CameraIntrinsics.from_fov(24, 18, 90.0, 60.0, near=0.05, far=8.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line per acceptance criterion; returns the verdict."""
    def record(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
