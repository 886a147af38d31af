"""Road network, stochastic edge velocities and time-dependent routing."""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path

import numpy as np


class GraphError(ValueError):
    """Raised for malformed graph configurations or unroutable queries."""


class RoadClass(Enum):
    """Road categories with their speed limit (km/h) and velocity law factors."""

    GREEN = ("green", 120.0, 0.9, 0.05)
    YELLOW = ("yellow", 80.0, 0.7, 0.10)
    RED = ("red", 60.0, 0.5, 0.15)

    def __init__(self, tag, speed_limit, mean_factor, std_factor):
        self.tag = tag
        self.speed_limit = speed_limit
        self.mean_factor = mean_factor
        self.std_factor = std_factor

    @property
    def mean(self) -> float:
        return self.mean_factor * self.speed_limit

    @property
    def std(self) -> float:
        return self.std_factor * self.speed_limit

    @classmethod
    def from_tag(cls, tag: str) -> "RoadClass":
        for rc in cls:
            if rc.tag == tag.lower():
                return rc
        raise GraphError(f"unknown road class {tag!r}")


@dataclass(frozen=True)
class Edge:
    u: int
    v: int
    length: float
    road_class: RoadClass
    directed: bool = False


@dataclass(frozen=True)
class Position:
    """Either a node, or a point ``offset`` km along the edge ``u -> v``."""

    node: int | None = None
    edge: tuple[int, int] | None = None
    offset: float = 0.0

    @classmethod
    def at(cls, node: int) -> "Position":
        return cls(node=node)

    @classmethod
    def on_edge(cls, u: int, v: int, offset: float) -> "Position":
        return cls(edge=(u, v), offset=offset)

    @property
    def at_node(self) -> bool:
        return self.node is not None


@dataclass
class VelocityField:
    """Per-edge average velocity (km/h), constant on ``[valid_from, valid_until)``."""

    v: np.ndarray
    valid_from: float = 0.0
    valid_until: float = float("inf")


@dataclass
class Route:
    node_seq: list[int]
    expected_time: float
    distance: float

    @property
    def next_node(self) -> int | None:
        return self.node_seq[1] if len(self.node_seq) > 1 else None


@dataclass
class TrafficGraph:
    node_count: int
    edges: list[Edge]
    evcs_nodes: list[int]
    name: str = "custom"
    _adj: list[list[tuple[int, int]]] = field(default_factory=list, repr=False)
    _index: dict[tuple[int, int], int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._adj = [[] for _ in range(self.node_count)]
        self._index = {}
        for idx, e in enumerate(self.edges):
            if e.u == e.v:
                raise GraphError(f"self-loop on node {e.u}")
            if not (0 <= e.u < self.node_count and 0 <= e.v < self.node_count):
                raise GraphError(f"edge ({e.u}, {e.v}) references a missing node")
            if not e.length > 0:
                raise GraphError(f"edge ({e.u}, {e.v}) has non-positive length")
            pairs = [(e.u, e.v)] if e.directed else [(e.u, e.v), (e.v, e.u)]
            for a, b in pairs:
                if (a, b) in self._index:
                    raise GraphError(f"duplicate edge ({a}, {b})")
                self._index[(a, b)] = idx
                self._adj[a].append((b, idx))
        for nbrs in self._adj:
            nbrs.sort()
        if not self.evcs_nodes:
            raise GraphError("at least one EVCS node is required")
        for k in self.evcs_nodes:
            if not 0 <= k < self.node_count:
                raise GraphError(f"EVCS node {k} out of range")
        if len(set(self.evcs_nodes)) != len(self.evcs_nodes):
            raise GraphError("duplicate EVCS nodes")
        if not self._connected():
            raise GraphError("graph is not connected")

    def _connected(self) -> bool:
        # Weak connectivity for directed edges, plain connectivity otherwise.
        und = [set() for _ in range(self.node_count)]
        for e in self.edges:
            und[e.u].add(e.v)
            und[e.v].add(e.u)
        seen = {0}
        stack = [0]
        while stack:
            a = stack.pop()
            for b in und[a]:
                if b not in seen:
                    seen.add(b)
                    stack.append(b)
        return len(seen) == self.node_count

    @property
    def n_evcs(self) -> int:
        return len(self.evcs_nodes)

    @property
    def lengths(self) -> np.ndarray:
        return np.array([e.length for e in self.edges])

    def edge_index(self, u: int, v: int) -> int:
        try:
            return self._index[(u, v)]
        except KeyError:
            raise GraphError(f"({u}, {v}) is not an edge") from None

    def neighbors(self, node: int) -> list[tuple[int, int]]:
        """``(neighbor, edge_index)`` pairs sorted by neighbor id."""
        return self._adj[node]

    def to_config(self) -> dict:
        return {
            "name": self.name,
            "nodes": self.node_count,
            "edges": [
                {"from": e.u, "to": e.v, "length_km": e.length, "class": e.road_class.tag,
                 **({"directed": True} if e.directed else {})}
                for e in self.edges
            ],
            "evcs_nodes": list(self.evcs_nodes),
        }


def build_graph(config: dict) -> TrafficGraph:
    """Validate a ``{nodes, edges, evcs_nodes}`` mapping and build the graph."""
    try:
        n = int(config["nodes"])
        raw_edges = config["edges"]
        evcs = [int(k) for k in config["evcs_nodes"]]
    except KeyError as exc:
        raise GraphError(f"graph config lacks {exc.args[0]!r}") from None
    edges = [
        Edge(
            u=int(e["from"]),
            v=int(e["to"]),
            length=float(e["length_km"]),
            road_class=RoadClass.from_tag(e["class"]),
            directed=bool(e.get("directed", False)),
        )
        for e in raw_edges
    ]
    return TrafficGraph(n, edges, evcs, name=config.get("name", "custom"))


def load_graph(path: str | Path | None = None) -> TrafficGraph:
    """Load a graph file; ``None`` or ``"graph39"`` gives the bundled network."""
    if path is None or str(path) == "graph39":
        text = resources.files("evnav.data").joinpath("graph39.json").read_text()
    else:
        text = Path(path).read_text()
    return build_graph(json.loads(text))


def sample_velocities(graph: TrafficGraph, rng: np.random.Generator,
                      valid_from: float = 0.0, valid_until: float = float("inf")) -> VelocityField:
    """Draw each edge's velocity from its class's normal law truncated to (0, limit].

    Out-of-range draws are redrawn rather than clipped.
    """
    means = np.array([e.road_class.mean for e in graph.edges])
    stds = np.array([e.road_class.std for e in graph.edges])
    limits = np.array([e.road_class.speed_limit for e in graph.edges])
    v = rng.normal(means, stds)
    bad = (v <= 0) | (v > limits)
    while bad.any():
        v[bad] = rng.normal(means[bad], stds[bad])
        bad = (v <= 0) | (v > limits)
    return VelocityField(v=v, valid_from=valid_from, valid_until=valid_until)


def travel_minutes(length_km: float, speed_kmh: float) -> float:
    return length_km / speed_kmh * 60.0


def dijkstra(graph: TrafficGraph, field: VelocityField, sources: dict[int, float],
             reverse: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Multi-source Dijkstra on minute weights.

    Returns ``(dist, pred)``; ties are settled lowest node id first. With
    ``reverse`` the search follows edges backwards, giving distances *to* the
    sources (identical to forward search on undirected graphs).
    """
    n = graph.node_count
    dist = np.full(n, np.inf)
    pred = np.full(n, -1, dtype=int)
    heap = []
    for s, d0 in sources.items():
        if d0 < dist[s]:
            dist[s] = d0
            heapq.heappush(heap, (d0, s))
    adj = graph._adj
    if reverse and any(e.directed for e in graph.edges):
        adj = [[] for _ in range(n)]
        for (a, b), idx in graph._index.items():
            adj[b].append((a, idx))
        for nbrs in adj:
            nbrs.sort()
    done = np.zeros(n, dtype=bool)
    v = field.v
    lengths = [e.length for e in graph.edges]
    while heap:
        d, a = heapq.heappop(heap)
        if done[a]:
            continue
        done[a] = True
        for b, idx in adj[a]:
            nd = d + lengths[idx] / v[idx] * 60.0
            if nd < dist[b]:
                dist[b] = nd
                pred[b] = a
                heapq.heappush(heap, (nd, b))
    return dist, pred


def shortest_path(graph: TrafficGraph, field: VelocityField, start: Position | int,
                  target: int) -> Route:
    """Minimum expected-travel-time route from ``start`` to ``target``.

    A mid-edge start must first finish its current edge ``u -> v``.
    """
    if isinstance(start, (int, np.integer)):
        start = Position.at(int(start))
    lengths = graph.lengths
    if start.at_node:
        head, head_time, head_km, prefix = start.node, 0.0, 0.0, []
    else:
        u, v = start.edge
        idx = graph.edge_index(u, v)
        remaining = lengths[idx] - start.offset
        head, prefix = v, [u]
        head_time = travel_minutes(remaining, field.v[idx])
        head_km = remaining
    if not 0 <= target < graph.node_count:
        raise GraphError(f"target {target} out of range")
    dist, pred = dijkstra(graph, field, {head: 0.0})
    if not np.isfinite(dist[target]):
        raise GraphError(f"node {target} unreachable")
    seq = [target]
    while seq[-1] != head:
        seq.append(int(pred[seq[-1]]))
    seq.reverse()
    km = head_km + sum(lengths[graph.edge_index(a, b)] for a, b in zip(seq, seq[1:]))
    return Route(node_seq=prefix + seq, expected_time=head_time + float(dist[target]), distance=km)
