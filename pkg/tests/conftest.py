import pytest

from hierrg.dynamics import continue_in_epsilon
from hierrg.funcs import GridSpec

# (criterion, passed, detail) rows collected by the acceptance suite
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def grid():
    return GridSpec()


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(6.0, 129)


@pytest.fixture(scope="session")
def branch(grid):
    """Nontrivial fixed points at eps = 0.05, 0.1, 0.2 (shared, they take ~30 s)."""
    eps = (0.05, 0.1, 0.2)
    return dict(zip(eps, continue_in_epsilon(list(eps), grid)))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
