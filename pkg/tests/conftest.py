import sys

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def record(n: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(passed), detail)
    print(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}", file=sys.stderr)
