import _criteria


def pytest_terminal_summary(terminalreporter):
    if _criteria.lines:
        terminalreporter.section("acceptance criteria")
        for line in _criteria.lines:
            terminalreporter.write_line(line)
