def pytest_terminal_summary(terminalreporter, exitstatus, config):
    from test_acceptance import VERDICTS

    lines = config.stash.get(VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
