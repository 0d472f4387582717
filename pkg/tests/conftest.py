import pytest

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report():
    """Record one acceptance line; the summary is printed at the end of the session."""

    def _report(number: int, passed: bool, detail: str):
        CRITERIA[number] = (bool(passed), detail)
        print(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
