import os
import re
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

_VERDICTS = []


@pytest.fixture
def verdict():
    """record(label, passed, detail): one line per acceptance sub-check, summarized per criterion."""
    def record(label, passed, detail=""):
        _VERDICTS.append((label, bool(passed), detail))
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    by_criterion = {}
    for label, passed, _ in _VERDICTS:
        num = int(re.match(r"\d+", label).group())
        by_criterion[num] = by_criterion.get(num, True) and passed
    for num in sorted(by_criterion):
        parts = [f"{lab} {'ok' if p else 'FAIL'}" for lab, p, _ in _VERDICTS
                 if int(re.match(r"\d+", lab).group()) == num]
        terminalreporter.write_line(f"{'PASS' if by_criterion[num] else 'FAIL'} criterion {num}: "
                                    + ", ".join(parts))
    terminalreporter.write_line("")
    for label, passed, detail in _VERDICTS:
        terminalreporter.write_line(f"  {'PASS' if passed else 'FAIL'} {label}: {detail}")
