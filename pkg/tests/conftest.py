import helpers


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains full-budget models unless their results are cached")


def pytest_terminal_summary(terminalreporter):
    if helpers.CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(helpers.CRITERIA_LINES, key=lambda l: int(l.split("[")[1].split("]")[0])):
            terminalreporter.write_line(line)
