import pytest

from llforest import ForestConfig, SimSpec, generate, grow_forest

# filled by test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def friedman_small():
    data, mu = generate(SimSpec("friedman", n=300, d=6, seed=11))
    return data, mu


@pytest.fixture(scope="session")
def small_forest(friedman_small):
    data, _ = friedman_small
    return grow_forest(data, ForestConfig(num_trees=50, seed=3))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
