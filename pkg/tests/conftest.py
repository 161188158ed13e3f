import os
import sys
from pathlib import Path

from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance")
    for n in range(1, 10):
        line = mod.VERDICTS.get(n)
        if line is None:
            continue
        terminalreporter.write_line(line)
        for extra in mod.VERDICTS.get(f"{n}+", []):
            terminalreporter.write_line("    " + extra)
