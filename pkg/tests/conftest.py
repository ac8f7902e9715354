import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def criterion_log(request):
    """Append one summary line per acceptance criterion; they are printed
    together at the end of the run."""
    return request.config.stash.setdefault(_LINES, [])


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
