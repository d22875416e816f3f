import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lascreen.synthgen import ScenarioConfig, generate_population  # noqa: E402

SMALL = dict(n_las=12, schools_per_la_mean=6, schools_per_la_min=3,
             pupils_per_school_mean=50, min_school_size=12)


def small_config(**kw):
    return ScenarioConfig(**{**SMALL, **kw})


@pytest.fixture(scope="session")
def small_population():
    return generate_population(small_config(seed=11))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
