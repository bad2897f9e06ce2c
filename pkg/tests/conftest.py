import pytest

RESULTS = {}


@pytest.fixture(scope="session")
def acceptance():
    """``record(number, title, passed, detail)`` for the acceptance summary."""
    def record(number, title, passed, detail=""):
        RESULTS[number] = (title, bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(RESULTS):
        title, passed, detail = RESULTS[number]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}  {status}  {title}: {detail}")
