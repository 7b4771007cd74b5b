import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def report(request):
    """Record one acceptance verdict line; all lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES, [])

    def record(name: str, passed: bool, detail: str) -> None:
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
