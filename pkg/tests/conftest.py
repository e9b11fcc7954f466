import pytest

_VERDICTS = {}


@pytest.fixture
def verdict():
    """record(number, passed, detail): one summary line per acceptance criterion."""
    def record(number, passed, detail):
        _VERDICTS[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        passed, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
