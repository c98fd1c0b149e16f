"""Collects one verdict line per acceptance criterion and prints them at the end."""

VERDICTS: dict[int, str] = {}


def record(number: int, passed: bool, detail: str) -> None:
    VERDICTS[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[n])
