import numpy as np
import pytest

from gaec.grid import Field

# criterion number -> (title, passed, detail); filled by tests in test_acceptance.py
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_field(rng):
    data = rng.standard_normal((6, 20, 24)).cumsum(axis=2).cumsum(axis=1) * 0.1
    return Field("smooth", data)
