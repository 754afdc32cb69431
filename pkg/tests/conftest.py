def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
