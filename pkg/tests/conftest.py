"""Shared pytest wiring.

The acceptance tests record one verdict line per criterion; echoing them
from the terminal-summary hook makes the verdicts visible even under
pytest's default output capture, where in-test prints are swallowed for
passing tests.
"""

acceptance_verdicts: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)
