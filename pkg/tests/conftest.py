import os

import pytest
from hypothesis import HealthCheck, settings

from magloc.bench import build_gridmap, build_magmap
from magloc.world_sim import default_routes, default_world

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def world():
    return default_world()


@pytest.fixture(scope="session")
def maps(world):
    """(plan, config, magmap, grid) for the default desk world."""
    plan, config = world
    routes = default_routes(plan)
    magmap, _ = build_magmap(plan, config, routes)
    grid = build_gridmap(plan, config, routes)
    return plan, config, magmap, grid


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
