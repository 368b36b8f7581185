ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_order):
            terminalreporter.write_line(line)


def _order(line):
    head = line.split(":", 1)[0].split()
    try:
        return (0, int(head[1].rstrip("abc")), head[1])
    except (IndexError, ValueError):
        return (1, 0, line)
