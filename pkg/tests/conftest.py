import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

# Filled by test_acceptance.py: one (criterion, passed, summary) row per criterion.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, summary in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"AC{cid:<2} {'PASS' if ok else 'FAIL'}  {summary}")
