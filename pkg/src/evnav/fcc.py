"""Future-charging-competition (FCC) encoding of the global state.

For a deciding EV, each station gets the queueing time the EV should expect
if it drove there now, given the committed plans of every other EV. The
resulting K-vector has a fixed size whatever the number of EVs.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass

import numpy as np

from .env import EvState, EvStatus, GlobalState


@dataclass(frozen=True)
class PlannedArrival:
    ev: int
    evcs: int
    at: float
    ct: float


@dataclass
class FccTensor:
    raw: np.ndarray
    probs: np.ndarray
    feasible: np.ndarray | None = None


def softmax(x: np.ndarray, sign: float = 1.0) -> np.ndarray:
    z = sign * np.asarray(x, dtype=float)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def arrival_time(state: GlobalState, ev: EvState, evcs: int) -> tuple[float, float]:
    """Expected minutes (and km) for ``ev`` to reach station ``evcs`` on the fastest route.

    A driving EV first finishes its current edge at its frozen speed.
    """
    table = state.routing()
    if ev.status is EvStatus.DRIVING:
        head = ev.edge[1]
        rem_km = ev.edge_len - ev.offset
        t0 = rem_km / ev.edge_speed * 60.0
    else:
        head, rem_km, t0 = ev.node, 0.0, 0.0
    return t0 + float(table.dist[evcs, head]), rem_km + float(table.km[evcs, head])


def charge_time(soc: float, route_km: float, state: GlobalState, evcs: int) -> tuple[float, bool]:
    """Minutes to refill after arriving; the flag is False when the battery would run dry."""
    cfg = state.config
    soc_arrive = soc - cfg.consumption_kwh_per_km * route_km / cfg.battery_kwh
    feasible = soc_arrive >= 0
    soc_arrive = max(0.0, soc_arrive)
    power = state.evcss[evcs].power_kw
    return (cfg.soc_max - soc_arrive) * cfg.battery_kwh / power * 60.0, feasible


def expected_queue(plans: list[PlannedArrival], me: PlannedArrival, spots: int,
                   busy: list[float] | None = None) -> float:
    """Wait of ``me`` behind the plans that reach the station first.

    ``busy`` holds each spot's remaining occupation (minutes from now) by EVs
    already at the station. Spots are taken greedily, earliest free first.
    """
    free = list(busy) if busy is not None else [0.0] * spots
    if len(free) != spots:
        raise ValueError("busy must list one entry per spot")
    earlier = sorted((p for p in plans if (p.at, p.ev) < (me.at, me.ev)), key=lambda p: (p.at, p.ev))
    for p in earlier:
        s = min(range(spots), key=lambda i: (free[i], i))
        free[s] = max(free[s], p.at) + p.ct
    return max(0.0, min(free) - me.at)


def queue_oracle(plans: list[PlannedArrival], me: PlannedArrival, spots: int,
                 busy: list[float] | None = None) -> float:
    """Discrete-event simulation of a FIFO multi-server station.

    Independent of :func:`expected_queue`: arrivals join one waiting line and
    are served by whichever spot frees up; departures are processed before
    arrivals at equal times.
    """
    busy = list(busy) if busy is not None else [0.0] * spots
    events = []  # (time, kind, order, payload); kind 0 = departure, 1 = arrival
    n_free = 0
    for i, b in enumerate(busy):
        if b > 0:
            events.append((b, 0, i, None))
        else:
            n_free += 1
    everyone = sorted(list(plans) + [me], key=lambda p: (p.at, p.ev))
    for order, p in enumerate(everyone):
        events.append((p.at, 1, order, p))
    heapq.heapify(events)
    line = deque()
    starts = {}
    seq = len(busy)
    while events:
        now, kind, _, p = heapq.heappop(events)
        if kind == 0:
            n_free += 1
        else:
            line.append(p)
        while n_free and line:
            q = line.popleft()
            n_free -= 1
            starts[q.ev] = now
            seq += 1
            heapq.heappush(events, (now + q.ct, 0, seq, None))
        if me.ev in starts:
            break
    return starts[me.ev] - me.at


def current_plans(state: GlobalState, exclude: int) -> dict[int, list[PlannedArrival]]:
    """Committed (station, arrival, charge) plans of all other active EVs."""
    plans: dict[int, list[PlannedArrival]] = {k: [] for k in range(state.n_evcs)}
    for ev in state.evs:
        if ev.id == exclude or ev.status.terminal or ev.target is None:
            continue
        at, km = arrival_time(state, ev, ev.target)
        ct, _ = charge_time(ev.soc, km, state, ev.target)
        plans[ev.target].append(PlannedArrival(ev.id, ev.target, at, ct))
    return plans


def fcc_tensor(state: GlobalState, ev_id: int, sign: float = 1.0) -> FccTensor:
    """Expected queueing minutes at every station for the deciding EV, softmaxed."""
    ev = state.evs[ev_id]
    if ev.status is not EvStatus.AT_NODE:
        raise ValueError(f"EV {ev_id} is not at a node")
    plans = current_plans(state, ev_id)
    K = state.n_evcs
    raw = np.zeros(K)
    feasible = np.ones(K, dtype=bool)
    horizon = state.config.horizon_min
    for j in range(K):
        at, km = arrival_time(state, ev, j)
        if not np.isfinite(at):
            raw[j] = horizon
            feasible[j] = False
            continue
        ct, ok = charge_time(ev.soc, km, state, j)
        feasible[j] = ok
        me = PlannedArrival(ev_id, j, at, ct)
        busy = [max(0.0, b - state.clock) for b in state.evcss[j].spots]
        raw[j] = expected_queue(plans[j], me, len(busy), busy)
    return FccTensor(raw=raw, probs=softmax(raw, sign), feasible=feasible)
