import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from simmatch.roadnet import LocalProjection, RoadNetwork
from simmatch.synth import grid_network

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

PROJ = LocalProjection(37.77, -122.42)


def line_network(coords_by_street, oneway=True):
    """Network from ``{street_id: [(x, y), ...]}``; nodes are polyline ends."""
    nodes, streets, index = {}, [], {}

    def node(p):
        p = (float(p[0]), float(p[1]))
        if p not in index:
            index[p] = len(index)
            nodes[index[p]] = p
        return index[p]

    for sid, pts in coords_by_street.items():
        u, v = node(pts[0]), node(pts[-1])
        streets.append({"id": sid, "from": u, "to": v, "oneway": oneway, "coords": pts})
    return RoadNetwork.from_streets(nodes, streets, PROJ)


@pytest.fixture(scope="session")
def grid6():
    return grid_network(6, 6)


@pytest.fixture(scope="session")
def grid3():
    return grid_network(3, 3)


def close(a, b, tol=1e-9):
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
