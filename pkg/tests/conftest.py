import pytest

# criterion number -> (status, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k in sorted(ACCEPTANCE, key=lambda c: (int(str(c).rstrip("ab")), str(c))):
        status, detail = ACCEPTANCE[k]
        tr.write_line(f"{status} criterion {k}: {detail}")
