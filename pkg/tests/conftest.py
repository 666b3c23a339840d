import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """Record an acceptance criterion's outcome, then assert it."""

    def record(number, passed, detail):
        _VERDICTS[number] = (bool(passed), detail)
        assert passed, f"criterion {number} failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        passed, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
