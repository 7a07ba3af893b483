import numpy as np
import pytest

from rgbdi_flow import sim

_CRITERIA: list[str] = []


@pytest.fixture
def record_criterion():
    """Collect one pass/fail line per acceptance criterion for the summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"CRITERION {number} {'PASS' if passed else 'FAIL'}: {detail}"
        print(line)
        _CRITERIA.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def K():
    return sim.default_intrinsics()


@pytest.fixture(scope="session")
def short_sequence():
    return sim.simulate_sequence(12, seed=7)
