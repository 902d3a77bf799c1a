import pytest

_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line; all lines are repeated in the terminal summary."""

    def record(number: int, ok: bool, detail: str, elapsed: float, budget: float) -> None:
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}  [{elapsed:.1f}s of {budget:g}s]"
        _LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_LINES):
            terminalreporter.write_line(line)
