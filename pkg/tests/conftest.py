"""Shared pytest hooks: always show the acceptance scorecard.

test_acceptance records one verdict line per criterion; output capture would
hide them for passing tests, so they are replayed in the terminal summary.
"""

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance scorecard")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
