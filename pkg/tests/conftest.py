import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import acceptance_log  # noqa: E402


def pytest_terminal_summary(terminalreporter):
    ran = any("test_acceptance" in r.nodeid for stats in terminalreporter.stats.values()
              for r in stats if hasattr(r, "nodeid"))
    if not ran:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, acceptance_log.TOTAL + 1):
        terminalreporter.write_line(acceptance_log.line(n))
