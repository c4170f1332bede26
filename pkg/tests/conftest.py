import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(name, passed, detail)``."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(name: str, passed: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        print(lines[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
