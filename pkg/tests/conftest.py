RESULTS = {}


def record(criterion, ok, detail=""):
    """Remember one acceptance verdict for the end-of-run summary."""
    RESULTS[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
