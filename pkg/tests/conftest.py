import pytest

# one line per acceptance criterion, collected while the suite runs
VERDICTS = {}


@pytest.fixture
def verdict():
    """Record a pass/fail line for an acceptance criterion and return ``ok``."""

    def record(number, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
