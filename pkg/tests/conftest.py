import pytest

_RESULTS = []


class AcceptanceLog:
    """Collects one pass/fail line per acceptance criterion."""

    def record(self, criterion, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
        _RESULTS.append(line)
        print(line)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in _RESULTS:
        terminalreporter.write_line(line)
