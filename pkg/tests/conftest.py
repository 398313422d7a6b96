import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (passed, one-line detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_runtest_logreport(report):
    # a criterion that raised before recording still gets its FAIL line
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when in ("setup", "call") and report.failed and name.startswith("test_criterion_"):
        n = int(name.split("_")[2])
        if n not in ACCEPTANCE:
            ACCEPTANCE[n] = (False, f"raised: {report.longrepr.reprcrash.message.splitlines()[0]}")
