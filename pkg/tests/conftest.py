import numpy as np
import pytest

from evnav.config import EnvConfig
from evnav.graph import Edge, RoadClass, TrafficGraph, VelocityField, build_graph, load_graph


@pytest.fixture(scope="session")
def graph39():
    return load_graph()


def line_graph(lengths, classes=None, evcs=(None,)):
    """Path 0-1-...-n with the given edge lengths; station at the last node by default."""
    n = len(lengths) + 1
    classes = classes or ["green"] * len(lengths)
    edges = [{"from": i, "to": i + 1, "length_km": L, "class": c}
             for i, (L, c) in enumerate(zip(lengths, classes))]
    evcs = [n - 1 if e is None else e for e in evcs]
    return build_graph({"nodes": n, "edges": edges, "evcs_nodes": evcs})


def fixed_field(graph, speeds):
    return VelocityField(np.asarray(speeds, dtype=float), 0.0, float("inf"))


@pytest.fixture
def tiny_config():
    return EnvConfig(n_evs=1, spots_per_evcs=1)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
