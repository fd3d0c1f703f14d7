import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criterion verdicts as one block at the end.

    The per-criterion lines are printed inside the tests too, but default
    fd-level capture hides them for passing tests; this keeps one visible
    pass/fail line per criterion in any pytest invocation that ran them.
    """
    for name, mod in sys.modules.items():
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            lines = getattr(mod, "REPORT_LINES", [])
            if lines:
                terminalreporter.section("acceptance criteria")
                for line in lines:
                    terminalreporter.write_line(line)
            break
