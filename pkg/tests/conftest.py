import pytest

# Lines recorded by the acceptance suite, echoed once at the end of the run.
CRITERIA: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> bool:
    CRITERIA[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(CRITERIA[n])
    return ok


@pytest.fixture
def criterion():
    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
