"""Shared pytest plumbing: the acceptance suite registers one line per
criterion here so the summary survives output capturing."""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)
