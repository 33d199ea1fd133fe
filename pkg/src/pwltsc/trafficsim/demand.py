"""Seeded vehicle demand: Poisson arrivals and route sampling."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from ..errors import ConfigError, RoutingError
from .network import TrafficGraph


@dataclass
class Schedule:
    """Vehicles in entry order: ``ticks[v]`` is the entry tick of vehicle ``v``."""

    ticks: np.ndarray
    routes: List[Tuple[int, ...]]
    tick_s: float = 1.0

    def __len__(self) -> int:
        return len(self.routes)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Schedule)
            and np.array_equal(self.ticks, other.ticks)
            and self.routes == other.routes
            and self.tick_s == other.tick_s
        )


def _successors(graph: TrafficGraph, e: int) -> List[int]:
    """Edges a vehicle on ``e`` may continue onto (no U-turns)."""
    if graph.exits_to_boundary[e]:
        return []
    nid = graph.edges[e].dst
    back = graph.edges[e].src
    return [k for k in graph.outgoing[nid] if graph.edges[k].dst != back]


class RouteTable:
    """Uniform sampling over shortest routes from a source edge to an exit edge.

    For every exit ``x`` a reverse BFS gives the hop distance ``dist[x][e]``
    and the number of shortest routes ``count[x][e]`` from edge ``e``;
    walking forward with probability proportional to ``count`` samples a
    route uniformly among the shortest ones.
    """

    def __init__(self, graph: TrafficGraph):
        self.graph = graph
        E = graph.n_edges
        self.succ = [_successors(graph, e) for e in range(E)]
        pred: List[List[int]] = [[] for _ in range(E)]
        for e, nxt in enumerate(self.succ):
            for k in nxt:
                pred[k].append(e)
        self.dist: Dict[int, np.ndarray] = {}
        self.count: Dict[int, np.ndarray] = {}
        for x in graph.exit_edges:
            dist = np.full(E, -1, dtype=np.int64)
            dist[x] = 0
            order = [x]
            queue = deque([x])
            while queue:
                e = queue.popleft()
                for p in pred[e]:
                    if dist[p] < 0:
                        dist[p] = dist[e] + 1
                        order.append(p)
                        queue.append(p)
            count = np.zeros(E)
            count[x] = 1.0
            for e in order[1:]:
                count[e] = sum(count[k] for k in self.succ[e] if dist[k] == dist[e] - 1)
            self.dist[x] = dist
            self.count[x] = count
        self.exits_from: Dict[int, List[int]] = {}
        for s in graph.source_edges:
            origin = graph.edges[s].src
            self.exits_from[s] = [
                x for x in graph.exit_edges if self.dist[x][s] >= 0 and graph.edges[x].dst != origin
            ]

    def sample(self, source: int, rng: np.random.Generator) -> Tuple[int, ...]:
        exits = self.exits_from.get(source)
        if not exits:
            raise RoutingError(f"no boundary exit reachable from source edge {self.graph.edges[source].id}")
        x = exits[int(rng.integers(len(exits)))]
        dist, count = self.dist[x], self.count[x]
        route = [source]
        e = source
        while e != x:
            nxt = [k for k in self.succ[e] if dist[k] == dist[e] - 1]
            w = np.array([count[k] for k in nxt])
            e = nxt[int(rng.choice(len(nxt), p=w / w.sum()))] if len(nxt) > 1 else nxt[0]
            route.append(e)
        return tuple(route)


def generate_demand(
    graph: TrafficGraph,
    seed: int,
    horizon_s: float,
    rates=None,
    tick_s: float = 1.0,
    routes: RouteTable = None,
) -> Schedule:
    """Poisson entries per source per tick over ``[0, horizon_s)``.

    ``rates`` (veh/s, one per source edge) defaults to the graph's source
    rates. Identical arguments give identical schedules.
    """
    rates = graph.source_rates if rates is None else np.asarray(rates, dtype=np.float64)
    if rates.shape != (len(graph.source_edges),):
        raise ConfigError(f"need {len(graph.source_edges)} source rates, got {rates.shape}")
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ConfigError("source rates must be finite and >= 0")
    n_ticks = int(round(horizon_s / tick_s))
    rng = np.random.default_rng(seed)
    counts = rng.poisson(rates * tick_s, size=(n_ticks, len(rates)))
    ticks, route_list = [], []
    if counts.sum() == 0:
        return Schedule(np.zeros(0, dtype=np.int64), [], tick_s)
    routes = routes or RouteTable(graph)
    for t, j in zip(*np.nonzero(counts)):
        for _ in range(counts[t, j]):
            ticks.append(int(t))
            route_list.append(routes.sample(graph.source_edges[j], rng))
    return Schedule(np.asarray(ticks, dtype=np.int64), route_list, tick_s)
