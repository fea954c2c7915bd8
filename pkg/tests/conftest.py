import os

import pytest

from mptransit import calibrate, load_scenario

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), "..", "scenarios")


def scenario_path(name: str) -> str:
    return os.path.join(SCENARIO_DIR, name)


@pytest.fixture(scope="session")
def cross_scenario():
    return load_scenario(scenario_path("cross.yaml"))


@pytest.fixture(scope="session")
def corridor_scenario():
    return load_scenario(scenario_path("corridor.yaml"))


@pytest.fixture(scope="session")
def starvation_scenario():
    return load_scenario(scenario_path("starvation.yaml"))


@pytest.fixture(scope="session")
def corridor_stats(corridor_scenario, tmp_path_factory):
    """Historical stats calibrated once per session from a full-observation run."""
    stats = calibrate(corridor_scenario, seed=0)
    path = tmp_path_factory.mktemp("stats") / "corridor_stats.csv"
    stats.to_csv(str(path))
    return stats


@pytest.fixture(scope="session")
def cross_stats(cross_scenario):
    return calibrate(cross_scenario.scale_demand(0.8), seed=0)


@pytest.fixture(scope="session")
def run_cache():
    """Session-wide memo for expensive simulation runs keyed by descriptor."""
    return {}
