import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per criterion; lines are echoed in the terminal summary."""

    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}"
        if detail:
            line += f" ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
