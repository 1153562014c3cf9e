import pytest

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k.split()[0])):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def report_criterion():
    def record(number: int, name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {number:>2} {name}: {detail}"
        ACCEPTANCE_LINES[f"{number} {name}"] = line
        print(line)

    return record
