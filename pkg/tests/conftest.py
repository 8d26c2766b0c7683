import pytest

_CRITERIA = []


@pytest.fixture
def record_criterion():
    """Log one pass/fail line for an acceptance criterion."""

    def record(number, passed, detail):
        status = "PASS" if passed is True else ("FAIL" if passed is False else str(passed))
        line = f"criterion {number}: {status}  {detail}"
        _CRITERIA.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
