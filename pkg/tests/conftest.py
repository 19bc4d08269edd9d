"""Shared pytest plumbing.

The acceptance tests append one line per criterion here; printing them in
the terminal summary keeps the pass/fail ledger visible even though pytest
captures per-test stdout.
"""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
