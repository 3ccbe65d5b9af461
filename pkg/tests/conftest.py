import re

_VERDICT = re.compile(r"^criterion \d+\w*: (PASS|FAIL)\b.*$", re.M)
_lines: list[str] = []


def pytest_runtest_logreport(report):
    # verdict lines are printed inside tests; pull them out of captured stdout once per test
    if report.when == "call":
        _lines.extend(m.group(0) for m in _VERDICT.finditer(report.capstdout))


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.section("acceptance criteria")
        for line in _lines:
            terminalreporter.write_line(line)
