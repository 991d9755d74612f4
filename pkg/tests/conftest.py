import pytest

_CRITERIA = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict: ``criterion(number, passed, detail)``.

    The verdict is printed at once and again in the end-of-run summary, and
    the test fails if ``passed`` is false.
    """

    def record(number, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA[number] = line
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[number])
