import sys

import numpy as np
import pytest
import scipy.linalg
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def spd_from_normal(rng, dim, cond=10.0):
    """SPD matrix built as ``G G^T / dim + eps I`` (independent of random_spd)."""
    g = rng.standard_normal((dim, dim + 2))
    a = g @ g.T / dim
    return a + np.trace(a) / (dim * cond) * np.eye(dim)


def oracle_distance(a, b):
    """Distance through Schur-based sqrtm/logm, not eigendecomposition."""
    si = np.linalg.inv(scipy.linalg.sqrtm(a).real)
    m = si @ b @ si
    return float(np.linalg.norm(scipy.linalg.logm(0.5 * (m + m.T)).real))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    report = getattr(module, "REPORT", None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(report):
        terminalreporter.write_line(report[number])
