import pytest

from exterior_yamabe.domain import build_grid, flat_metric, full_region, well_metric

# acceptance lines collected by tests/test_acceptance.py, echoed in the summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def grid512():
    return build_grid(3, 1000.0, 512)


@pytest.fixture(scope="session")
def flat512(grid512):
    return flat_metric(grid512)


@pytest.fixture(scope="session")
def well512(grid512):
    return well_metric(grid512)


@pytest.fixture(scope="session")
def full512(grid512):
    return full_region(grid512)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
