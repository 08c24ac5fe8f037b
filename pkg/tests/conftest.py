import pytest

# (criterion, status, detail) lines printed after the run
ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    def record(criterion: int, status: str, detail: str) -> None:
        ACCEPTANCE_LINES.append((criterion, status, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in sorted(ACCEPTANCE_LINES, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {criterion:2d}: {status:4s}  {detail}")
