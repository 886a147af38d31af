import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evnav.graph import (GraphError, Position, RoadClass, build_graph, dijkstra, load_graph,
                         sample_velocities, shortest_path)
from evnav.selftest import bellman_ford, random_graph

from conftest import fixed_field, line_graph


# -- oracle first -------------------------------------------------------------

def test_bellman_ford_oracle_on_hand_graph():
    # triangle: 0-1 10 km, 1-2 10 km, 0-2 30 km, all at 60 km/h -> 1 min per km
    g = build_graph({"nodes": 3, "evcs_nodes": [2], "edges": [
        {"from": 0, "to": 1, "length_km": 10, "class": "green"},
        {"from": 1, "to": 2, "length_km": 10, "class": "green"},
        {"from": 0, "to": 2, "length_km": 30, "class": "green"}]})
    d = bellman_ford(g, fixed_field(g, [60, 60, 60]), 0)
    assert d.tolist() == [0.0, 10.0, 20.0]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 50))
def test_dijkstra_matches_bellman_ford(seed, n):
    rng = np.random.default_rng(seed)
    g, field = random_graph(rng, n)
    s = int(rng.integers(n))
    d, pred = dijkstra(g, field, {s: 0.0})
    np.testing.assert_allclose(d, bellman_ford(g, field, s), rtol=0, atol=1e-9)
    # predecessor tree reproduces every distance
    for v in range(n):
        if v != s:
            u = pred[v]
            w = g.lengths[g.edge_index(u, v)] / field.v[g.edge_index(u, v)] * 60
            assert d[u] + w == pytest.approx(d[v], abs=1e-9)


# -- construction -------------------------------------------------------------

def test_minimal_graph():
    g = build_graph({"nodes": 2, "evcs_nodes": [1],
                     "edges": [{"from": 0, "to": 1, "length_km": 10, "class": "green"}]})
    assert g.node_count == 2 and g.n_evcs == 1


def test_bundled_graph(graph39):
    assert graph39.node_count == 39
    assert {e.road_class for e in graph39.edges} == set(RoadClass)
    assert all(2 <= e.length <= 12 for e in graph39.edges)
    assert graph39.n_evcs == 4


@pytest.mark.parametrize("edges, evcs, msg", [
    ([{"from": 0, "to": 0, "length_km": 1, "class": "red"}], [0], "self-loop"),
    ([{"from": 0, "to": 1, "length_km": 0, "class": "red"}], [1], "non-positive"),
    ([{"from": 0, "to": 1, "length_km": 1, "class": "red"}], [5], "out of range"),
    ([{"from": 0, "to": 1, "length_km": 1, "class": "red"},
      {"from": 1, "to": 0, "length_km": 2, "class": "red"}], [1], "duplicate"),
])
def test_rejects_bad_graphs(edges, evcs, msg):
    with pytest.raises(GraphError, match=msg):
        build_graph({"nodes": 2, "edges": edges, "evcs_nodes": evcs})


def test_rejects_disconnected():
    with pytest.raises(GraphError, match="not connected"):
        build_graph({"nodes": 3, "evcs_nodes": [1],
                     "edges": [{"from": 0, "to": 1, "length_km": 1, "class": "red"}]})


def test_config_round_trip(graph39):
    again = build_graph(graph39.to_config())
    assert again.edges == graph39.edges and again.evcs_nodes == graph39.evcs_nodes


# -- velocities ---------------------------------------------------------------

def test_class_constants():
    assert [(c.speed_limit, c.mean, c.std) for c in RoadClass] == [
        (120, pytest.approx(108), pytest.approx(6)),
        (80, pytest.approx(56), pytest.approx(8)),
        (60, pytest.approx(30), pytest.approx(9))]


def test_velocity_bounds_and_determinism(graph39):
    a = sample_velocities(graph39, np.random.default_rng(3))
    b = sample_velocities(graph39, np.random.default_rng(3))
    assert np.array_equal(a.v, b.v)
    limits = np.array([e.road_class.speed_limit for e in graph39.edges])
    assert np.all(a.v > 0) and np.all(a.v <= limits)


def test_truncation_redraws_rather_than_clips():
    # a red edge has ~0.04 % of its normal mass above the limit; with clipping
    # some draws would sit exactly at 60
    g = line_graph([5.0] * 200, ["red"] * 200)
    v = np.concatenate([sample_velocities(g, np.random.default_rng(s)).v for s in range(100)])
    assert np.all(v < 60) and np.all(v > 0)


# -- routes -------------------------------------------------------------------

def test_single_edge_time():
    g = line_graph([10.0])
    r = shortest_path(g, fixed_field(g, [50]), 0, 1)
    assert r.expected_time == pytest.approx(12.0)
    assert r.node_seq == [0, 1] and r.distance == 10.0


def test_mid_edge_start():
    g = line_graph([10.0])
    r = shortest_path(g, fixed_field(g, [50]), Position.on_edge(0, 1, 5.0), 1)
    assert r.expected_time == pytest.approx(6.0)


def test_mid_edge_start_continues_forward():
    # from the middle of 0->1 heading to 1, reaching 0 means passing 1 and coming back
    g = line_graph([10.0, 4.0])
    r = shortest_path(g, fixed_field(g, [60, 60]), Position.on_edge(0, 1, 2.0), 0)
    assert r.node_seq == [0, 1, 0]
    assert r.expected_time == pytest.approx(8.0 + 10.0)


def test_route_invariants(graph39):
    field = sample_velocities(graph39, np.random.default_rng(1))
    r = shortest_path(graph39, field, 0, 38)
    pairs = list(zip(r.node_seq, r.node_seq[1:]))
    idx = [graph39.edge_index(a, b) for a, b in pairs]
    assert r.distance == pytest.approx(sum(graph39.lengths[i] for i in idx))
    assert r.expected_time == pytest.approx(sum(graph39.lengths[i] / field.v[i] * 60 for i in idx))


def test_tie_break_lowest_node():
    # two equal routes 0-1-3 and 0-2-3: predecessor of 3 must be 1
    g = build_graph({"nodes": 4, "evcs_nodes": [3], "edges": [
        {"from": 0, "to": 1, "length_km": 1, "class": "green"},
        {"from": 0, "to": 2, "length_km": 1, "class": "green"},
        {"from": 1, "to": 3, "length_km": 1, "class": "green"},
        {"from": 2, "to": 3, "length_km": 1, "class": "green"}]})
    r = shortest_path(g, fixed_field(g, [60] * 4), 0, 3)
    assert r.node_seq == [0, 1, 3]


def test_unreachable_target_in_directed_graph():
    g = build_graph({"nodes": 2, "evcs_nodes": [0], "edges": [
        {"from": 0, "to": 1, "length_km": 1, "class": "green", "directed": True}]})
    with pytest.raises(GraphError, match="unreachable"):
        shortest_path(g, fixed_field(g, [60]), 1, 0)
