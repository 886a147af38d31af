"""Event-driven multi-EV charging navigation environment.

Each EV is an agent that chooses a target charging station whenever it
reaches a node; it then drives one edge of the fastest route towards that
station before deciding again. Velocities and prices are piecewise-constant
processes refreshed on fixed periods, and each station serves arrivals on a
small number of FIFO charging spots.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .config import EnvConfig
from .graph import Position, Route, TrafficGraph, VelocityField, dijkstra, load_graph, sample_velocities

_STREAM_INIT, _STREAM_VELOCITY, _STREAM_PRICE = 0, 1, 2


class EnvError(RuntimeError):
    pass


class EpisodeOver(EnvError):
    """No non-terminal EV is left to schedule."""


class EvStatus(Enum):
    DRIVING = "driving"
    AT_NODE = "at_node"
    QUEUING = "queuing"
    CHARGING = "charging"
    DONE = "done"
    STRANDED = "stranded"

    @property
    def terminal(self) -> bool:
        return self in (EvStatus.QUEUING, EvStatus.CHARGING, EvStatus.DONE, EvStatus.STRANDED)


COST_KEYS = ("road_energy", "charging", "drive_time", "wait_time", "penalty")


@dataclass
class EvState:
    id: int
    node: int
    soc: float
    status: EvStatus = EvStatus.AT_NODE
    target: int | None = None
    route: Route | None = None
    # Current edge, set while driving; velocity frozen on entry.
    edge: tuple[int, int] | None = None
    edge_len: float = 0.0
    edge_speed: float = 0.0
    edge_start: float = 0.0
    edge_soc0: float = 0.0
    offset: float = 0.0
    strands_at: float | None = None
    event_time: float = 0.0
    charge_start: float | None = None
    charge_finish: float | None = None
    costs: dict = field(default_factory=lambda: dict.fromkeys(COST_KEYS, 0.0))

    @property
    def position(self) -> Position:
        if self.edge is not None and self.status in (EvStatus.DRIVING, EvStatus.STRANDED):
            return Position.on_edge(self.edge[0], self.edge[1], self.offset)
        return Position.at(self.node)

    @property
    def total_cost(self) -> float:
        return sum(self.costs.values())


@dataclass
class EvcsState:
    node: int
    base_price: float
    price: float
    power_kw: float
    spots: list[float]
    queue_log: list[tuple[int, int, float, float, float]] = field(default_factory=list)


@dataclass
class RewardRecord:
    ev: int
    value: float
    terminal: bool
    clock: float = 0.0
    node: int = -1
    kind: str = "road"
    breakdown: dict = field(default_factory=dict)


@dataclass
class Observation:
    position: int
    soc: float
    ri: np.ndarray

    def encode(self, node_count: int) -> np.ndarray:
        return encode_observation(self.position, self.soc, self.ri, node_count)


@dataclass
class RoutingTable:
    """Fastest routes to every station under one velocity window."""

    dist: np.ndarray  # (K, n) minutes to station k
    next_hop: np.ndarray  # (K, n)
    km: np.ndarray  # (K, n) route length

    def route(self, node: int, k: int, target_node: int) -> Route:
        seq = [node]
        while seq[-1] != target_node:
            seq.append(int(self.next_hop[k, seq[-1]]))
        return Route(node_seq=seq, expected_time=float(self.dist[k, node]), distance=float(self.km[k, node]))


@dataclass
class GlobalState:
    config: EnvConfig
    graph: TrafficGraph
    seed: int
    clock: float
    evs: list[EvState]
    evcss: list[EvcsState]
    field: VelocityField
    event_queue: list[tuple[float, int]] = field(default_factory=list)
    velocity_window: int = 0
    price_window: int = 0
    trace: list[tuple] = field(default_factory=list)
    cumulative_cost: float = 0.0
    _routing: dict = field(default_factory=dict, repr=False)

    @property
    def n_evcs(self) -> int:
        return len(self.evcss)

    def routing(self) -> RoutingTable:
        key = self.velocity_window
        table = self._routing.get(key)
        if table is None:
            table = build_routing_table(self.graph, self.field)
            self._routing = {key: table}
        return table


def build_routing_table(graph: TrafficGraph, vfield: VelocityField) -> RoutingTable:
    K, n = graph.n_evcs, graph.node_count
    dist = np.empty((K, n))
    next_hop = np.full((K, n), -1, dtype=int)
    km = np.zeros((K, n))
    lengths = graph.lengths
    for k, tnode in enumerate(graph.evcs_nodes):
        d, pred = dijkstra(graph, vfield, {tnode: 0.0}, reverse=True)
        dist[k] = d
        next_hop[k] = pred
        for b in np.argsort(d, kind="stable"):
            a = pred[b]
            if a >= 0:
                km[k, b] = km[k, a] + lengths[graph.edge_index(b, a)]
    return RoutingTable(dist, next_hop, km)


def _window_rng(seed: int, stream: int, window: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, window])


def _sample_prices(base: np.ndarray, rel_std: float, rng: np.random.Generator) -> np.ndarray:
    lam = rng.normal(base, rel_std * base)
    bad = lam <= 0
    while bad.any():
        lam[bad] = rng.normal(base[bad], rel_std * base[bad])
        bad = lam <= 0
    return lam


def reset(config: EnvConfig, seed: int, graph: TrafficGraph | None = None) -> GlobalState:
    """Initial state: EVs on distinct non-station nodes, all due to decide at t=0."""
    config.validate()
    graph = graph if graph is not None else load_graph(config.graph)
    free_nodes = [v for v in range(graph.node_count) if v not in set(graph.evcs_nodes)]
    if config.n_evs > len(free_nodes):
        raise EnvError(f"{config.n_evs} EVs do not fit on {len(free_nodes)} non-station nodes")
    rng = _window_rng(seed, _STREAM_INIT, 0)
    starts = rng.choice(free_nodes, size=config.n_evs, replace=False)
    socs = rng.uniform(config.soc_init_low, config.soc_init_high, size=config.n_evs)
    base = rng.uniform(config.price_base_low, config.price_base_high, size=graph.n_evcs)
    prices = _sample_prices(base, config.price_rel_std, _window_rng(seed, _STREAM_PRICE, 0))
    vfield = sample_velocities(graph, _window_rng(seed, _STREAM_VELOCITY, 0), 0.0,
                               config.velocity_period_min)
    evs = [EvState(id=i, node=int(s), soc=float(q)) for i, (s, q) in enumerate(zip(starts, socs))]
    evcss = [
        EvcsState(node=k, base_price=float(a), price=float(p), power_kw=config.charge_power_kw,
                  spots=[0.0] * config.spots_per_evcs)
        for k, a, p in zip(graph.evcs_nodes, base, prices)
    ]
    state = GlobalState(config=config, graph=graph, seed=seed, clock=0.0, evs=evs,
                        evcss=evcss, field=vfield)
    for ev in evs:
        heapq.heappush(state.event_queue, (0.0, ev.id))
    return state


def next_decision(state: GlobalState) -> tuple[float, int]:
    """Pop the earliest pending event; ties go to the lowest EV id."""
    if not state.event_queue:
        raise EpisodeOver("all EVs are terminal")
    return heapq.heappop(state.event_queue)


def _refresh(state: GlobalState):
    cfg = state.config
    w = int(math.floor(state.clock / cfg.velocity_period_min))
    if w != state.velocity_window:
        state.velocity_window = w
        state.field = sample_velocities(
            state.graph, _window_rng(state.seed, _STREAM_VELOCITY, w),
            w * cfg.velocity_period_min, (w + 1) * cfg.velocity_period_min)
    p = int(math.floor(state.clock / cfg.price_period_min))
    if p != state.price_window:
        state.price_window = p
        base = np.array([s.base_price for s in state.evcss])
        lam = _sample_prices(base, cfg.price_rel_std, _window_rng(state.seed, _STREAM_PRICE, p))
        for s, x in zip(state.evcss, lam):
            s.price = float(x)


def advance(state: GlobalState, t: float):
    """Move the clock to ``t``, dragging every driving EV along its edge."""
    if t < state.clock:
        raise EnvError(f"clock cannot go back from {state.clock} to {t}")
    cfg = state.config
    state.clock = t
    for ev in state.evs:
        if ev.status is EvStatus.DRIVING:
            ev.offset = min(ev.edge_len, (t - ev.edge_start) * ev.edge_speed / 60.0)
            ev.soc = max(0.0, ev.edge_soc0 - cfg.consumption_kwh_per_km * ev.offset / cfg.battery_kwh)
        elif ev.status in (EvStatus.QUEUING, EvStatus.CHARGING):
            if t >= ev.charge_finish:
                ev.status = EvStatus.DONE
            elif t >= ev.charge_start:
                ev.status = EvStatus.CHARGING
    _refresh(state)


def _record(state: GlobalState, ev: EvState, event: str, reward: float):
    state.cumulative_cost -= reward
    state.trace.append((state.clock, ev.id, event, ev.node, ev.soc, reward, state.cumulative_cost))


def _book(ev: EvState, breakdown: dict) -> float:
    for key, val in breakdown.items():
        ev.costs[key] += val
    return -sum(breakdown.values())


def enqueue_and_charge(state: GlobalState, ev_id: int, evcs: int) -> float:
    """Put the EV on the earliest-free spot of ``evcs``; returns its wait in minutes."""
    ev = state.evs[ev_id]
    station = state.evcss[evcs]
    cfg = state.config
    now = state.clock
    spot = int(np.argmin(station.spots))
    start = max(now, station.spots[spot])
    duration = (cfg.soc_max - ev.soc) * cfg.battery_kwh / station.power_kw * 60.0
    finish = start + duration
    if not finish > start:
        finish = start + 1e-9
    station.spots[spot] = finish
    station.queue_log.append((ev.id, spot, now, start, finish))
    ev.charge_start, ev.charge_finish = start, finish
    ev.status = EvStatus.CHARGING if start <= now else EvStatus.QUEUING
    return start - now


def settle_reward(state: GlobalState, ev_id: int) -> RewardRecord:
    """Reward for the edge the EV just completed, or its charging cost on reaching the target."""
    ev = state.evs[ev_id]
    cfg = state.config
    if ev.status is not EvStatus.AT_NODE:
        raise EnvError(f"EV {ev_id} is not at a node")
    k = ev.target
    station = state.evcss[k]
    if ev.node == station.node:
        energy = (cfg.soc_max - ev.soc) * cfg.battery_kwh
        price = station.price
        wait = enqueue_and_charge(state, ev_id, k)
        breakdown = {"charging": energy * price, "wait_time": cfg.time_cost_per_min * wait}
        value = _book(ev, breakdown)
        rec = RewardRecord(ev_id, value, True, state.clock, ev.node, "charge", breakdown)
        _record(state, ev, "charge", value)
        return rec
    d, v = ev.edge_len, ev.edge_speed
    breakdown = {
        "road_energy": cfg.consumption_kwh_per_km * station.price * d,
        "drive_time": cfg.time_cost_per_min * d / v * 60.0,
    }
    value = _book(ev, breakdown)
    rec = RewardRecord(ev_id, value, False, state.clock, ev.node, "road", breakdown)
    _record(state, ev, "arrive", value)
    return rec


def _strand(state: GlobalState, ev: EvState) -> RewardRecord:
    ev.status = EvStatus.STRANDED
    breakdown = {"penalty": state.config.fail_penalty}
    value = _book(ev, breakdown)
    _record(state, ev, "strand", value)
    return RewardRecord(ev.id, value, True, state.clock, ev.node, "strand", breakdown)


def apply_action(state: GlobalState, ev_id: int, action: int) -> GlobalState:
    """Commit EV ``ev_id`` to station ``action`` and start the first edge of its route."""
    if not 0 <= ev_id < len(state.evs):
        raise EnvError(f"no EV {ev_id}")
    ev = state.evs[ev_id]
    if ev.status is not EvStatus.AT_NODE:
        raise EnvError(f"EV {ev_id} is not waiting at a node ({ev.status.value})")
    if not 0 <= action < state.n_evcs:
        raise EnvError(f"action {action} outside [0, {state.n_evcs})")
    cfg = state.config
    target_node = state.evcss[action].node
    ev.target = int(action)
    ev.route = state.routing().route(ev.node, action, target_node)
    _record(state, ev, "decide", 0.0)
    nxt = ev.route.next_node
    if nxt is None:
        # Already standing on the chosen station.
        ev.edge = None
        ev.edge_len = ev.edge_speed = 0.0
        ev.event_time = state.clock
        ev.strands_at = None
        heapq.heappush(state.event_queue, (state.clock, ev.id))
        ev.status = EvStatus.AT_NODE
        return state
    idx = state.graph.edge_index(ev.node, nxt)
    ev.edge = (ev.node, nxt)
    ev.edge_len = state.graph.edges[idx].length
    ev.edge_speed = float(state.field.v[idx])
    ev.edge_start = state.clock
    ev.edge_soc0 = ev.soc
    ev.offset = 0.0
    reach_km = ev.soc * cfg.battery_kwh / cfg.consumption_kwh_per_km
    if reach_km < ev.edge_len:
        ev.strands_at = reach_km
        ev.event_time = state.clock + reach_km / ev.edge_speed * 60.0
    else:
        ev.strands_at = None
        ev.event_time = state.clock + ev.edge_len / ev.edge_speed * 60.0
    ev.status = EvStatus.DRIVING
    heapq.heappush(state.event_queue, (ev.event_time, ev.id))
    return state


def _arrive(state: GlobalState, ev: EvState) -> RewardRecord:
    cfg = state.config
    if ev.strands_at is not None:
        ev.offset = ev.strands_at
        ev.soc = 0.0
        return _strand(state, ev)
    if ev.edge is not None:
        ev.node = ev.edge[1]
        ev.offset = ev.edge_len
        ev.soc = max(0.0, ev.edge_soc0 - cfg.consumption_kwh_per_km * ev.edge_len / cfg.battery_kwh)
    ev.status = EvStatus.AT_NODE
    return settle_reward(state, ev.id)


def advance_to_decision(state: GlobalState) -> tuple[int | None, list[RewardRecord]]:
    """Run events until some EV must choose a station.

    Returns ``(ev_id, records)`` where ``records`` are the rewards settled on
    the way; ``ev_id`` is ``None`` once the episode is over.
    """
    records = []
    while state.event_queue:
        t, ev_id = next_decision(state)
        advance(state, t)
        ev = state.evs[ev_id]
        if ev.status is EvStatus.AT_NODE and ev.target is None:
            return ev_id, records
        if t > state.config.horizon_min:
            records.append(_strand(state, ev))
            continue
        rec = _arrive(state, ev)
        records.append(rec)
        if not rec.terminal:
            return ev_id, records
    return None, records


def is_over(state: GlobalState) -> bool:
    return not state.event_queue


def encode_observation(node: int, soc: float, ri: np.ndarray, node_count: int) -> np.ndarray:
    x = np.zeros(node_count + 1 + len(ri))
    x[node] = 1.0
    x[node_count] = soc
    x[node_count + 1:] = ri
    return x


def local_observation(state: GlobalState, ev_id: int, ri: np.ndarray) -> Observation:
    ev = state.evs[ev_id]
    if ev.status is not EvStatus.AT_NODE:
        raise EnvError(f"EV {ev_id} has no local observation while {ev.status.value}")
    ri = np.asarray(ri, dtype=float)
    if ri.shape != (state.n_evcs,):
        raise ValueError(f"RI must have shape ({state.n_evcs},), got {ri.shape}")
    if np.any(ri < 0) or np.any(ri > 1) or abs(ri.sum() - 1.0) > 1e-9:
        raise ValueError("RI must be a probability vector")
    return Observation(position=ev.node, soc=ev.soc, ri=ri)


def trace_rows(state: GlobalState) -> list[tuple]:
    return list(state.trace)


TRACE_HEADER = ("clock", "ev", "event", "node", "soc", "reward", "cumulative_cost")
