import acceptance_support


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_support.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_support.LINES:
            terminalreporter.write_line(line)
