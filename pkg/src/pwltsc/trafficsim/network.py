"""Road-network graph, topology documents and the bundled presets.

A topology document is JSON::

    {"nodes": [{"id": "A", "kind": "signal", "phase_program": [["e1"], ["e2"], ["e3"], ["e4"]]}, ...],
     "edges": [{"id": "e1", "from": "B", "to": "A", "lanes": 3, "length_m": 100, "speed_mps": 13.89}, ...],
     "sources": [{"edge": "e1", "rate_veh_per_s": 0.01}, ...],
     "meta": {...}}

Nodes of kind ``"boundary"`` are network entry/exit points: vehicles appear
on edges leaving them and disappear when they reach one. Every other node is
a signalised intersection (an agent) with four green stages; a stage lists
the incoming edges it serves. When ``phase_program`` is omitted each stage
serves one approach, cycling through the approaches in edge order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from ..errors import ValidationError

N_STAGES = 4
SPEED_LIMIT = 13.89


@dataclass(frozen=True)
class Edge:
    id: str
    src: str
    dst: str
    lanes: int
    length: float
    speed: float = SPEED_LIMIT


@dataclass
class Node:
    id: str
    kind: str = "signal"
    phase_program: Optional[List[List[str]]] = None


@dataclass
class TrafficGraph:
    """Directed road graph with derived index tables.

    ``intersections`` lists the signalised nodes in document order; position
    ``i`` in that list is agent ``i``. ``incoming[i]`` holds edge indices in
    observation-slot order.
    """

    nodes: List[Node]
    edges: List[Edge]
    sources: Dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._validate()
        self.node_index = {n.id: k for k, n in enumerate(self.nodes)}
        self.edge_index = {e.id: k for k, e in enumerate(self.edges)}
        self.intersections = [n.id for n in self.nodes if n.kind == "signal"]
        self.agent_index = {nid: i for i, nid in enumerate(self.intersections)}
        boundary = {n.id for n in self.nodes if n.kind == "boundary"}

        self.edge_src = np.array([self.node_index[e.src] for e in self.edges], dtype=np.int64)
        self.edge_dst = np.array([self.node_index[e.dst] for e in self.edges], dtype=np.int64)
        self.lanes = np.array([e.lanes for e in self.edges], dtype=np.int64)
        self.length = np.array([e.length for e in self.edges], dtype=np.float64)
        self.speed = np.array([e.speed for e in self.edges], dtype=np.float64)
        self.exits_to_boundary = np.array([e.dst in boundary for e in self.edges])
        self.exit_edges = [k for k, e in enumerate(self.edges) if e.dst in boundary]
        self.source_edges = [self.edge_index[eid] for eid in self.sources]
        self.source_rates = np.array([self.sources[eid] for eid in self.sources], dtype=np.float64)

        self.outgoing = {n.id: [k for k, e in enumerate(self.edges) if e.src == n.id] for n in self.nodes}
        self.incoming: List[List[int]] = []
        self.stage_edges: List[List[List[int]]] = []
        for nid in self.intersections:
            node = self.nodes[self.node_index[nid]]
            inc = [k for k, e in enumerate(self.edges) if e.dst == nid]
            program = node.phase_program or default_phase_program([self.edges[k].id for k in inc])
            order = []
            for stage in program:
                for eid in stage:
                    if self.edge_index[eid] not in order:
                        order.append(self.edge_index[eid])
            order += [k for k in inc if k not in order]
            self.incoming.append(order)
            self.stage_edges.append([[self.edge_index[eid] for eid in stage] for stage in program])
            node.phase_program = [list(s) for s in program]
        self.max_in_degree = max((len(x) for x in self.incoming), default=0)
        # membership[i, slot, s]: stage s serves the edge in observation slot `slot`
        self.membership = np.zeros((self.N, self.max_in_degree, N_STAGES))
        self.slot_mask = np.zeros((self.N, self.max_in_degree))
        for i, inc in enumerate(self.incoming):
            self.slot_mask[i, : len(inc)] = 1.0
            for s, stage in enumerate(self.stage_edges[i]):
                for e in stage:
                    self.membership[i, inc.index(e), s] = 1.0
        # incidence[i, e] = 1 when edge e ends at intersection i
        self.incidence = np.zeros((self.N, len(self.edges)))
        for i, inc in enumerate(self.incoming):
            self.incidence[i, inc] = 1.0

    @property
    def N(self) -> int:
        return len(self.intersections)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def _validate(self):
        ids = [n.id for n in self.nodes]
        dup = sorted({x for x in ids if ids.count(x) > 1})
        if dup:
            raise ValidationError(f"duplicate node ids: {dup}", dup)
        node_ids = set(ids)
        bad_kind = [n.id for n in self.nodes if n.kind not in ("signal", "boundary")]
        if bad_kind:
            raise ValidationError(f"unknown node kind on {bad_kind}", bad_kind)
        eids = [e.id for e in self.edges]
        dup = sorted({x for x in eids if eids.count(x) > 1})
        if dup:
            raise ValidationError(f"duplicate edge ids: {dup}", dup)
        dangling = [e.id for e in self.edges if e.src not in node_ids or e.dst not in node_ids]
        if dangling:
            raise ValidationError(f"edges reference missing nodes: {dangling}", dangling)
        loops = [e.id for e in self.edges if e.src == e.dst]
        if loops:
            raise ValidationError(f"edges with identical endpoints: {loops}", loops)
        bad_len = [e.id for e in self.edges if not (e.length > 0)]
        if bad_len:
            raise ValidationError(f"nonpositive edge length: {bad_len}", bad_len)
        bad_lanes = [e.id for e in self.edges if int(e.lanes) != e.lanes or e.lanes < 1]
        if bad_lanes:
            raise ValidationError(f"lane count must be an integer >= 1: {bad_lanes}", bad_lanes)
        bad_speed = [e.id for e in self.edges if not (e.speed > 0)]
        if bad_speed:
            raise ValidationError(f"nonpositive speed: {bad_speed}", bad_speed)
        kinds = {n.id: n.kind for n in self.nodes}
        by_id = {e.id: e for e in self.edges}
        bad_src = [
            eid for eid, r in self.sources.items()
            if eid not in by_id or kinds[by_id[eid].src] != "boundary" or not (r >= 0)
        ]
        if bad_src:
            raise ValidationError(f"sources must be edges leaving a boundary node with rate >= 0: {bad_src}", bad_src)
        bad_prog = []
        for n in self.nodes:
            if n.kind != "signal" or n.phase_program is None:
                continue
            inc = {e.id for e in self.edges if e.dst == n.id}
            listed = {eid for stage in n.phase_program for eid in stage}
            if len(n.phase_program) != N_STAGES or not listed <= inc or listed != inc:
                bad_prog.append(n.id)
        if bad_prog:
            raise ValidationError(
                f"phase programs need {N_STAGES} stages covering exactly the incoming edges: {bad_prog}", bad_prog
            )

    def to_document(self) -> dict:
        return {
            "nodes": [
                {"id": n.id, "kind": n.kind, **({"phase_program": n.phase_program} if n.kind == "signal" else {})}
                for n in self.nodes
            ],
            "edges": [
                {"id": e.id, "from": e.src, "to": e.dst, "lanes": e.lanes, "length_m": e.length, "speed_mps": e.speed}
                for e in self.edges
            ],
            "sources": [{"edge": eid, "rate_veh_per_s": r} for eid, r in self.sources.items()],
            "meta": self.meta,
        }

    def with_demand_scale(self, factor: float) -> "TrafficGraph":
        doc = self.to_document()
        for s in doc["sources"]:
            s["rate_veh_per_s"] *= factor
        return load_network(doc)


def default_phase_program(incoming_ids: List[str]) -> List[List[str]]:
    """One approach per stage; fewer than four approaches repeat cyclically."""
    if not incoming_ids:
        return [[] for _ in range(N_STAGES)]
    if len(incoming_ids) <= N_STAGES:
        return [[incoming_ids[s % len(incoming_ids)]] for s in range(N_STAGES)]
    return [incoming_ids[s::N_STAGES] for s in range(N_STAGES)]


def _parse(doc: dict) -> TrafficGraph:
    missing = [k for k in ("nodes", "edges") if k not in doc]
    if missing:
        raise ValidationError(f"topology document lacks {missing}", missing)
    unknown = sorted(set(doc) - {"nodes", "edges", "sources", "meta"})
    if unknown:
        raise ValidationError(f"unknown topology keys: {unknown}", unknown)
    try:
        nodes = [Node(n["id"], n.get("kind", "signal"), n.get("phase_program")) for n in doc["nodes"]]
        edges = [
            Edge(e["id"], e["from"], e["to"], e.get("lanes", 1), float(e["length_m"]), float(e.get("speed_mps", SPEED_LIMIT)))
            for e in doc["edges"]
        ]
        sources = {s["edge"]: float(s["rate_veh_per_s"]) for s in doc.get("sources", [])}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed topology document: {exc}", [str(exc)]) from exc
    return TrafficGraph(nodes, edges, sources, dict(doc.get("meta", {})))


def load_network(source) -> TrafficGraph:
    """Load a graph from a preset name, a JSON path or a parsed document."""
    if isinstance(source, TrafficGraph):
        return source
    if isinstance(source, dict):
        return _parse(source)
    name = str(source)
    if name in PRESETS:
        return _parse(PRESETS[name]())
    path = Path(name)
    if not path.exists():
        raise ValidationError(f"unknown preset or missing topology file: {name}", [name])
    return _parse(json.loads(path.read_text()))


# -- presets ------------------------------------------------------------------

# (name, dr, dc) in the order incoming slots are listed: from north, east, south, west
_DIRS = (("n", -1, 0), ("e", 0, 1), ("s", 1, 0), ("w", 0, -1))


def grid_document(
    rows: int,
    cols: int,
    length: float = 100.0,
    lanes: int = 3,
    speed: float = SPEED_LIMIT,
    vehicles_per_episode: float = 930.0,
    episode_s: float = 2500.0,
) -> dict:
    """Regular grid; every intersection has four approaches.

    Border approaches come from boundary nodes; the total source rate is set
    so that ``vehicles_per_episode`` vehicles are expected per episode.
    """
    def nid(r, c):
        return f"i{r}_{c}"

    nodes, edges, sources = [], [], []
    for r in range(rows):
        for c in range(cols):
            nodes.append({"id": nid(r, c), "kind": "signal"})
    for r in range(rows):
        for c in range(cols):
            for d, dr, dc in _DIRS:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    up = nid(rr, cc)
                else:
                    up = f"b_{nid(r, c)}_{d}"
                    nodes.append({"id": up, "kind": "boundary"})
                    edges.append({"id": f"{nid(r, c)}->{up}", "from": nid(r, c), "to": up,
                                  "lanes": lanes, "length_m": length, "speed_mps": speed})
                    sources.append(f"{up}->{nid(r, c)}")
                edges.append({"id": f"{up}->{nid(r, c)}", "from": up, "to": nid(r, c),
                              "lanes": lanes, "length_m": length, "speed_mps": speed})
    rate = vehicles_per_episode / episode_s / len(sources)
    return {
        "nodes": nodes,
        "edges": edges,
        "sources": [{"edge": s, "rate_veh_per_s": rate} for s in sources],
        "meta": {"name": f"grid{rows}x{cols}", "vehicles_per_episode": vehicles_per_episode},
    }


def _custom_document(name, roads, externals, vehicles_per_episode, lanes=2, episode_s=2500.0):
    # roads: (a, b, length) bidirectional; externals: (node, length) in+out pairs
    signals = sorted({a for a, _, _ in roads} | {b for _, b, _ in roads} | {n for n, _ in externals})
    nodes = [{"id": s, "kind": "signal"} for s in signals]
    edges, sources = [], []
    for a, b, length in roads:
        for u, v in ((a, b), (b, a)):
            edges.append({"id": f"{u}->{v}", "from": u, "to": v, "lanes": lanes,
                          "length_m": length, "speed_mps": SPEED_LIMIT})
    for k, (node, length) in enumerate(externals):
        b = f"b{k}"
        nodes.append({"id": b, "kind": "boundary"})
        edges.append({"id": f"{b}->{node}", "from": b, "to": node, "lanes": lanes,
                      "length_m": length, "speed_mps": SPEED_LIMIT})
        edges.append({"id": f"{node}->{b}", "from": node, "to": b, "lanes": lanes,
                      "length_m": length, "speed_mps": SPEED_LIMIT})
        sources.append(f"{b}->{node}")
    rate = vehicles_per_episode / episode_s / len(sources)
    return {
        "nodes": nodes,
        "edges": edges,
        "sources": [{"edge": s, "rate_veh_per_s": rate} for s in sources],
        "meta": {"name": name, "vehicles_per_episode": vehicles_per_episode},
    }


def non_euclidean8_document() -> dict:
    """Eight intersections, two of them three-way, ten external inputs, roads 75-150 m."""
    roads = [
        ("v0", "v1", 120.0), ("v1", "v2", 110.0), ("v0", "v3", 110.0), ("v1", "v4", 130.0),
        ("v2", "v5", 130.0), ("v3", "v4", 112.0), ("v4", "v5", 132.0), ("v4", "v6", 115.0),
        ("v5", "v7", 105.0), ("v6", "v7", 132.0),
    ]
    externals = [("v0", 90.0), ("v0", 100.0), ("v1", 80.0), ("v2", 75.0), ("v2", 95.0),
                 ("v3", 150.0), ("v6", 85.0), ("v6", 140.0), ("v7", 100.0), ("v7", 125.0)]
    return _custom_document("non_euclidean8", roads, externals, 250.0)


def non_euclidean4_document() -> dict:
    """Four-intersection cut of the non-Euclidean network: a hub with two three-way neighbours."""
    roads = [("v1", "v4", 130.0), ("v3", "v4", 112.0), ("v4", "v5", 132.0)]
    externals = [("v1", 80.0), ("v1", 120.0), ("v1", 95.0), ("v3", 150.0), ("v3", 90.0),
                 ("v4", 115.0), ("v5", 75.0), ("v5", 140.0)]
    return _custom_document("non_euclidean4", roads, externals, 200.0)


def corridor_document(n: int = 2, length: float = 100.0, vehicles_per_episode: float = 300.0) -> dict:
    """``n`` intersections in a row, each with side streets."""
    roads = [(f"c{k}", f"c{k + 1}", length) for k in range(n - 1)]
    externals = [("c0", length)] + [(f"c{k}", length) for k in range(n) for _ in range(2)] + [(f"c{n - 1}", length)]
    doc = _custom_document(f"corridor{n}", roads, externals, vehicles_per_episode)
    return doc


PRESETS = {
    "grid5x5": lambda: grid_document(5, 5, vehicles_per_episode=930.0),
    "grid2x2": lambda: grid_document(2, 2, vehicles_per_episode=150.0),
    "non_euclidean8": non_euclidean8_document,
    "non_euclidean4": non_euclidean4_document,
    "corridor2": lambda: corridor_document(2),
}
