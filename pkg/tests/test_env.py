import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evnav import env as E
from evnav.config import EnvConfig
from evnav.fcc import PlannedArrival, queue_oracle

from conftest import fixed_field, line_graph


def pinned(graph, cfg, speeds, price=0.45, soc=0.5, start=0, seed=0):
    """Single-EV state with velocities and the price pinned for hand arithmetic."""
    state = E.reset(cfg, seed, graph)
    state.field = fixed_field(graph, speeds)
    state._routing = {}
    for s in state.evcss:
        s.price = price
    ev = state.evs[0]
    ev.node, ev.soc = start, soc
    return state


def step_to_decision(state):
    ev_id, recs = E.advance_to_decision(state)
    return ev_id, recs


# -- reset and scheduling -----------------------------------------------------

def test_reset_soc_and_determinism(graph39):
    cfg = EnvConfig(n_evs=2)
    a, b = E.reset(cfg, 5, graph39), E.reset(cfg, 5, graph39)
    assert all(0.4 <= ev.soc <= 0.6 for ev in a.evs)
    assert [(e.node, e.soc) for e in a.evs] == [(e.node, e.soc) for e in b.evs]
    assert np.array_equal(a.field.v, b.field.v)
    assert [s.price for s in a.evcss] == [s.price for s in b.evcss]
    nodes = [ev.node for ev in a.evs]
    assert len(set(nodes)) == 2 and not set(nodes) & set(graph39.evcs_nodes)
    assert a.clock == 0 and sorted(a.event_queue) == [(0.0, 0), (0.0, 1)]


def test_reset_prices(graph39):
    for seed in range(50):
        s = E.reset(EnvConfig(), seed, graph39)
        assert all(0.3 <= c.base_price <= 0.7 and c.price > 0 for c in s.evcss)


def test_reset_capacity_bound(graph39):
    with pytest.raises(E.EnvError):
        E.reset(EnvConfig(n_evs=39), 0, graph39)


def test_next_decision_order(graph39):
    s = E.reset(EnvConfig(n_evs=2), 0, graph39)
    s.event_queue = [(5.0, 1), (3.0, 0)]
    import heapq
    heapq.heapify(s.event_queue)
    assert E.next_decision(s) == (3.0, 0)
    s.event_queue = [(3.0, 1), (3.0, 0)]
    heapq.heapify(s.event_queue)
    assert E.next_decision(s) == (3.0, 0)
    E.next_decision(s)
    with pytest.raises(E.EpisodeOver):
        E.next_decision(s)


# -- transitions and rewards --------------------------------------------------

def test_one_edge_green_at_100():
    g = line_graph([10.0])
    s = pinned(g, EnvConfig(n_evs=1), [100.0])
    ev_id, _ = step_to_decision(s)
    E.apply_action(s, 0, 0)
    assert s.event_queue[0][0] == pytest.approx(6.0)
    soc0 = s.evs[0].soc
    _, recs = step_to_decision(s)
    assert s.clock == pytest.approx(6.0)
    assert soc0 - s.evs[0].soc == pytest.approx(0.15 * 10 / 60)


def test_road_reward():
    g = line_graph([10.0, 5.0])
    s = pinned(g, EnvConfig(n_evs=1), [50.0, 50.0])
    step_to_decision(s)
    E.apply_action(s, 0, 0)
    ev_id, recs = step_to_decision(s)
    assert ev_id == 0 and len(recs) == 1 and not recs[0].terminal
    assert recs[0].value == pytest.approx(-0.15 * 0.45 * 10 - 0.4 * 12)
    assert recs[0].value == pytest.approx(-5.475)


def test_charge_reward_with_wait():
    g = line_graph([10.0])
    s = pinned(g, EnvConfig(n_evs=1, spots_per_evcs=1), [60.0], soc=0.525)
    step_to_decision(s)
    E.apply_action(s, 0, 0)
    s.evcss[0].spots = [10.0 + 10.0]  # arrival at minute 10, spot frees at 20
    s.evcss[0].price = 0.45
    ev_id, recs = step_to_decision(s)
    assert ev_id is None and recs[-1].terminal
    assert s.evs[0].soc == pytest.approx(0.5)
    assert recs[-1].value == pytest.approx(-30 * 0.45 - 0.4 * 10)
    assert recs[-1].value == pytest.approx(-17.5)
    assert s.evs[0].status is E.EvStatus.QUEUING


def test_stranding_distance():
    g = line_graph([10.0])
    cfg = EnvConfig(n_evs=1)
    s = pinned(g, cfg, [60.0], soc=0.01)
    step_to_decision(s)
    E.apply_action(s, 0, 0)
    reach = 0.01 * cfg.battery_kwh / cfg.consumption_kwh_per_km  # 4 km
    _, recs = step_to_decision(s)
    assert s.evs[0].status is E.EvStatus.STRANDED
    assert recs[-1].value == -200 and recs[-1].terminal
    assert s.clock == pytest.approx(reach)  # 60 km/h: one km per minute
    assert s.evs[0].position.offset == pytest.approx(reach)


def test_fail_penalty_dominates_legal_costs(graph39):
    # an empty battery refilled at four standard deviations above the dearest base price
    cfg = EnvConfig()
    price = 0.7 * (1 + 4 * cfg.price_rel_std)
    charging = cfg.battery_kwh * price
    assert cfg.fail_penalty > charging
    # legal episodes in practice stay far below the penalty
    costs = []
    for seed in range(30):
        s = E.reset(cfg, seed, graph39)
        while True:
            ev_id, _ = E.advance_to_decision(s)
            if ev_id is None:
                break
            E.apply_action(s, ev_id, int(np.argmin(s.routing().dist[:, s.evs[ev_id].node])))
        costs += [ev.total_cost for ev in s.evs]
    assert max(costs) < cfg.fail_penalty


def test_concurrent_moves_share_one_clock():
    g = line_graph([10.0, 10.0, 10.0, 10.0], evcs=(2,))
    cfg = EnvConfig(n_evs=2)
    s = E.reset(cfg, 0, g)
    s.field = fixed_field(g, [60.0] * 4)
    s._routing = {}
    s.evs[0].node, s.evs[1].node = 0, 4
    s.evs[0].soc = s.evs[1].soc = 0.5
    ev, _ = E.advance_to_decision(s)
    E.apply_action(s, ev, 0)
    ev, _ = E.advance_to_decision(s)
    E.apply_action(s, ev, 0)
    ev, _ = E.advance_to_decision(s)
    assert s.clock == pytest.approx(10.0)
    assert all(e.soc == pytest.approx(0.5 - 0.025) for e in s.evs)


def test_zero_length_route_when_standing_on_station():
    g = line_graph([10.0])
    s = pinned(g, EnvConfig(n_evs=1), [60.0], start=0)
    step_to_decision(s)
    s.evs[0].node = 1
    E.apply_action(s, 0, 0)
    ev_id, recs = step_to_decision(s)
    assert ev_id is None and recs[-1].kind == "charge"
    assert s.evs[0].costs["drive_time"] == 0


def test_apply_action_errors(graph39):
    s = E.reset(EnvConfig(n_evs=1), 0, graph39)
    E.advance_to_decision(s)
    with pytest.raises(E.EnvError):
        E.apply_action(s, 0, 4)
    E.apply_action(s, 0, 0)
    with pytest.raises(E.EnvError):
        E.apply_action(s, 0, 0)


# -- queues -------------------------------------------------------------------

def queue_state(spots):
    g = line_graph([10.0])
    s = E.reset(EnvConfig(n_evs=1, spots_per_evcs=spots), 0, g)
    return s


def test_idle_spots_no_wait():
    s = queue_state(2)
    s.evs[0].soc = 0.5
    assert E.enqueue_and_charge(s, 0, 0) == 0.0
    assert s.evcss[0].spots[0] == pytest.approx(30.0)


def test_single_spot_wait():
    s = queue_state(1)
    s.evcss[0].spots = [7.0]
    s.evs[0].soc = 0.5
    assert E.enqueue_and_charge(s, 0, 0) == pytest.approx(7.0)


def test_three_earlier_evs_match_event_replay():
    g = line_graph([10.0])
    cfg = EnvConfig(n_evs=4, spots_per_evcs=1)
    s = E.reset(cfg, 0, line_graph([1.0] * 5, evcs=(5,)))
    arrivals = [(0.0, 0.5), (2.0, 0.6), (3.0, 0.4), (4.0, 0.5)]
    waits = []
    plans = []
    for i, (t, soc) in enumerate(arrivals):
        s.clock = t
        s.evs[i].soc = soc
        waits.append(E.enqueue_and_charge(s, i, 0))
        plans.append(PlannedArrival(i, 0, t, (1 - soc) * 60))
    # first spot busy until 30; the rest queue FIFO
    assert waits[3] == pytest.approx((30 - 4) + 24 + 36)
    assert waits[3] == pytest.approx(queue_oracle(plans[:3], plans[3], 1))
    for entry in s.evcss[0].queue_log:
        ev, spot, arrive, start, finish = entry
        assert arrive <= start < finish


# -- observation --------------------------------------------------------------

def test_local_observation_packing():
    g = line_graph([1.0] * 4)
    s = E.reset(EnvConfig(n_evs=1), 0, line_graph([1.0] * 4, evcs=(4, 0, 1, 2)))
    s.evs[0].node, s.evs[0].soc = 3, 0.5
    obs = E.local_observation(s, 0, np.full(4, 0.25))
    np.testing.assert_array_equal(obs.encode(5), [0, 0, 0, 1, 0, 0.5, 0.25, 0.25, 0.25, 0.25])
    with pytest.raises(ValueError):
        E.local_observation(s, 0, np.array([0.5, 0.5, 0.5, 0.0]))
    s.evs[0].status = E.EvStatus.DONE
    with pytest.raises(E.EnvError):
        E.local_observation(s, 0, np.full(4, 0.25))


# -- whole-episode invariants -------------------------------------------------

def play(cfg, seed, graph, policy_seed):
    rng = np.random.default_rng(policy_seed)
    s = E.reset(cfg, seed, graph)
    rewards = {i: 0.0 for i in range(cfg.n_evs)}
    seen = []
    last = 0.0
    while True:
        ev_id, recs = E.advance_to_decision(s)
        for r in recs:
            rewards[r.ev] += r.value
        assert s.clock >= last
        last = s.clock
        seen.append((s.clock, tuple(st.price for st in s.evcss), s.field.v.copy(),
                     s.velocity_window, s.price_window))
        if ev_id is None:
            break
        E.apply_action(s, ev_id, int(rng.integers(s.n_evcs)))
    return s, rewards, seen


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 5), st.integers(1, 2))
def test_episode_invariants(graph39, seed, n_evs, spots):
    cfg = EnvConfig(n_evs=n_evs, spots_per_evcs=spots)
    s, rewards, seen = play(cfg, seed, graph39, seed + 1)
    for ev in s.evs:
        assert ev.status.terminal
        assert -rewards[ev.id] == pytest.approx(ev.total_cost, abs=1e-9)
        assert 0.0 <= ev.soc <= 1.0
    for st_ in s.evcss:
        by_spot = {}
        for ev, spot, arrive, start, finish in st_.queue_log:
            assert arrive <= start < finish
            by_spot.setdefault(spot, []).append((start, finish))
        for ivs in by_spot.values():
            ivs.sort()
            assert all(a[1] <= b[0] + 1e-12 for a, b in zip(ivs, ivs[1:]))
    # piecewise constancy: same window -> same values; windows follow the clock
    for clock, prices, v, vw, pw in seen:
        assert vw == math.floor(clock / cfg.velocity_period_min)
        assert pw == math.floor(clock / cfg.price_period_min)
    by_pw, by_vw = {}, {}
    for clock, prices, v, vw, pw in seen:
        assert by_pw.setdefault(pw, prices) == prices
        assert np.array_equal(by_vw.setdefault(vw, v), v)


def test_episode_trace_is_deterministic(graph39):
    cfg = EnvConfig(n_evs=3)
    a, ra, _ = play(cfg, 11, graph39, 4)
    b, rb, _ = play(cfg, 11, graph39, 4)
    assert E.trace_rows(a) == E.trace_rows(b) and ra == rb
    assert E.TRACE_HEADER == ("clock", "ev", "event", "node", "soc", "reward", "cumulative_cost")
