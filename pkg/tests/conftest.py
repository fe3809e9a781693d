import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# Lines appended by the acceptance suite, echoed in the terminal summary.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
