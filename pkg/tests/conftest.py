import pytest

ACCEPTANCE_LINES = {}


def report_criterion(number: int, passed: bool, detail: str, seconds: float) -> None:
    status = "PASS" if passed else "FAIL"
    line = f"criterion {number:2d}: {status}  ({seconds:7.1f} s)  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


@pytest.fixture
def record_criterion():
    return report_criterion


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
