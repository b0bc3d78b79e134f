import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    import acceptance_report

    if not acceptance_report.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(acceptance_report.LINES):
        terminalreporter.write_line(acceptance_report.LINES[n])
