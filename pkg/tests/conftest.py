"""Collects acceptance verdicts and prints them once at the end of the run."""

ACCEPTANCE = {}


def record(number: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (title, bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{number}] {title}: {detail}")
