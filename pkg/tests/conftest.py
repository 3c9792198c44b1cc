import pytest

ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict: criterion(n, passed, detail)."""
    def record(n, passed, detail):
        ACCEPTANCE[n] = (bool(passed), detail)
        line = f"CRITERION {n}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"CRITERION {n}: {'PASS' if passed else 'FAIL'}  {detail}")
