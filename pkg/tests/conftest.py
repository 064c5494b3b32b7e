import pytest

# criterion number -> (status, one-line description), filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, line = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {line}")


@pytest.fixture
def record_criterion():
    def record(number: int, passed, line: str) -> None:
        status = passed if isinstance(passed, str) else ("PASS" if passed else "FAIL")
        ACCEPTANCE[number] = (status, line)
        print(f"[{status}] criterion {number}: {line}")
    return record
