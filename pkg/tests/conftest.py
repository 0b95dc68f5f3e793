import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

ACCEPTANCE_LINES = []


@contextmanager
def criterion(number: int, title: str):
    """Record one PASS/FAIL line per acceptance criterion; details can be appended."""
    info = {"details": ""}
    start = time.perf_counter()
    try:
        yield info
    except BaseException:
        status = "FAIL"
        raise
    else:
        status = "PASS"
    finally:
        line = f"criterion {number:>2} [{status}] {title} ({time.perf_counter() - start:.1f}s) {info['details']}"
        ACCEPTANCE_LINES.append(line)
        print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def desk_factorial():
    """The 80-treatment design at desk scale, run once per session."""
    from decoypns.harness import ExperimentPlan, run_factorial, table4_configurations

    plan = ExperimentPlan(table4_configurations(), master_seed=2024)
    return plan, run_factorial(plan)
