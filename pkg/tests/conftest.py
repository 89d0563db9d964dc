import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Print the acceptance criterion lines after the run, capture or not."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_RESULTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
