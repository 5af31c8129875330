from acceptance_log import LINES


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(LINES, key=lambda x: x[0]):
            terminalreporter.write_line(line)
