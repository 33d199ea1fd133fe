"""Discrete-time queue model of a signalised road network.

Time advances in ticks of ``tick_s`` seconds (1 s by default); a decision
step of ``dt`` seconds runs ``dt / tick_s`` ticks. Within a tick:

1. scheduled vehicles enter their source edge;
2. vehicles in transit that reached the back of the queue join the queue for
   their next edge (or leave the network at a boundary node);
3. signal heads advance; edges with green discharge up to ``s * lanes``
   vehicles per second, FIFO across their destination queues;
4. every queued vehicle adds ``tick_s`` seconds of waiting to the
   intersection it waits at.
"""

from __future__ import annotations

import copy
import csv
import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..errors import ActionError, ConfigError, InvariantError
from .demand import Schedule
from .network import N_STAGES, TrafficGraph

GREEN = "green"
YELLOW = "yellow"


@dataclass
class SimParams:
    saturation_flow: float = 0.5  # veh / lane / s
    gap_m: float = 7.5
    tick_s: float = 1.0
    yellow_s: float = 2.0
    g_min_s: float = 5.0
    g_max_s: float = 50.0
    record_phases: bool = False


@dataclass
class PhaseMachine:
    """Signal head of one intersection.

    A change of stage is only started after ``g_min`` seconds of green and is
    always preceded by ``yellow`` seconds; after ``g_max`` seconds of green a
    change is forced (to the requested stage, or the next one when the
    request is the current stage).
    """

    stage: int = 0
    mode: str = GREEN
    elapsed: float = 0.0
    request: int = 0
    pending: int = 0
    yellow: float = 2.0
    g_min: float = 5.0
    g_max: float = 50.0

    def begin_tick(self) -> Optional[int]:
        """Possibly start a yellow; return the green stage for this tick, if any."""
        if self.mode == GREEN:
            if self.elapsed >= self.g_max:
                self.pending = self.request if self.request != self.stage else (self.stage + 1) % N_STAGES
                self.mode, self.elapsed = YELLOW, 0.0
            elif self.request != self.stage and self.elapsed >= self.g_min:
                self.pending = self.request
                self.mode, self.elapsed = YELLOW, 0.0
        return self.stage if self.mode == GREEN else None

    def end_tick(self, dt: float) -> bool:
        """Advance the timer; return True when a yellow just ended."""
        self.elapsed += dt
        if self.mode == YELLOW and self.elapsed >= self.yellow - 1e-9:
            self.mode, self.stage, self.elapsed = GREEN, self.pending, 0.0
            return True
        return False


@dataclass
class SimState:
    graph_edges: int
    n_agents: int
    tick: int = 0
    k: int = 0
    n_edge: np.ndarray = None  # vehicles on edge (moving + queued)
    q_edge: np.ndarray = None  # queued (speed 0)
    credit: np.ndarray = None  # fractional discharge allowance
    transit: list = field(default_factory=list)  # heap of (arrival_tick, seq, vid, edge)
    queues: list = None  # per edge: {next_edge: deque[(seq, vid)]}
    wait_total: np.ndarray = None  # seconds, cumulative
    wait_step: np.ndarray = None  # seconds accrued during the last decision step
    phases: List[PhaseMachine] = None
    entered: int = 0
    exited: int = 0
    seq: int = 0
    next_vehicle: int = 0
    pos: dict = field(default_factory=dict)  # vid -> index into its route
    phase_log: list = field(default_factory=list)  # (time_s, agent, mode, stage)

    def copy(self) -> "SimState":
        return copy.deepcopy(self)

    @property
    def in_transit(self) -> int:
        return len(self.transit)

    @property
    def queued(self) -> int:
        return int(self.q_edge.sum())


class Simulator:
    """Owns a :class:`SimState`; the graph and schedule are shared read-only."""

    def __init__(self, graph: TrafficGraph, schedule: Schedule, params: SimParams = None):
        self.graph = graph
        self.schedule = schedule
        self.params = params or SimParams()
        if not math.isclose(schedule.tick_s, self.params.tick_s):
            raise ConfigError("schedule and simulator tick lengths differ")
        self.cap_per_tick = self.params.saturation_flow * graph.lanes * self.params.tick_s
        self.state = self._initial_state()

    def _initial_state(self) -> SimState:
        g, p = self.graph, self.params
        E = g.n_edges
        st = SimState(E, g.N)
        st.n_edge = np.zeros(E, dtype=np.int64)
        st.q_edge = np.zeros(E, dtype=np.int64)
        st.credit = np.zeros(E)
        st.queues = [dict() for _ in range(E)]
        st.wait_total = np.zeros(g.N)
        st.wait_step = np.zeros(g.N)
        st.phases = [PhaseMachine(yellow=p.yellow_s, g_min=p.g_min_s, g_max=p.g_max_s) for _ in range(g.N)]
        if p.record_phases:
            st.phase_log = [(0.0, i, GREEN, 0) for i in range(g.N)]
        return st

    def reset(self, schedule: Schedule = None) -> SimState:
        if schedule is not None:
            self.schedule = schedule
        self.state = self._initial_state()
        return self.state

    # -- observables ---------------------------------------------------------

    def density(self, edge: int) -> float:
        g = self.graph
        return min(1.0, self.state.n_edge[edge] * self.params.gap_m / g.length[edge])

    def densities(self) -> np.ndarray:
        return np.minimum(1.0, self.state.n_edge * self.params.gap_m / self.graph.length)

    def queue_length(self, i: int) -> int:
        return int(self.state.q_edge[self.graph.incoming[i]].sum())

    def queue_lengths(self) -> np.ndarray:
        return np.array([self.queue_length(i) for i in range(self.graph.N)], dtype=np.int64)

    # -- control -------------------------------------------------------------

    def apply_actions(self, actions: Sequence[int]) -> SimState:
        actions = np.asarray(actions)
        if actions.shape != (self.graph.N,):
            raise ActionError(f"need {self.graph.N} actions, got shape {actions.shape}")
        bad = [i for i, a in enumerate(actions.tolist()) if a not in range(N_STAGES)]
        if bad:
            raise ActionError(f"stage index out of range for agents {bad}")
        for pm, a in zip(self.state.phases, actions.tolist()):
            pm.request = int(a)
        return self.state

    def step(self, actions: Sequence[int] = None, dt: float = 5.0, tick_hook=None) -> SimState:
        """Advance one decision step of ``dt`` seconds (mutates and returns the state).

        ``tick_hook(sim)``, if given, runs before every tick and may rewrite the
        stage requests (used by tick-exact fixed-time control).
        """
        if actions is not None:
            self.apply_actions(actions)
        n = dt / self.params.tick_s
        if dt <= 0 or abs(n - round(n)) > 1e-9:
            raise ConfigError(f"dt={dt} must be a positive multiple of the tick {self.params.tick_s}")
        st = self.state
        st.wait_step = np.zeros(self.graph.N)
        for _ in range(int(round(n))):
            if tick_hook is not None:
                tick_hook(self)
            self._tick()
        st.k += 1
        self._check_conservation()
        return st

    def _travel_ticks(self, e: int) -> int:
        g, p = self.graph, self.params
        free = max(0.0, g.length[e] - self.state.q_edge[e] * p.gap_m)
        return max(1, math.ceil(free / g.speed[e] / p.tick_s - 1e-9))

    def _enter_edge(self, vid: int, e: int, t: int):
        st = self.state
        st.n_edge[e] += 1
        heapq.heappush(st.transit, (t + self._travel_ticks(e), st.seq, vid, e))
        st.seq += 1

    def _tick(self):
        st, g, p = self.state, self.graph, self.params
        t = st.tick
        routes = self.schedule.routes
        ticks = self.schedule.ticks
        # 1. entries
        while st.next_vehicle < len(routes) and ticks[st.next_vehicle] <= t:
            vid = st.next_vehicle
            st.next_vehicle += 1
            st.pos[vid] = 0
            st.entered += 1
            self._enter_edge(vid, routes[vid][0], t)
        # 2. arrivals at the queue tail
        while st.transit and st.transit[0][0] <= t:
            _, _, vid, e = heapq.heappop(st.transit)
            if g.exits_to_boundary[e]:
                st.n_edge[e] -= 1
                st.exited += 1
                del st.pos[vid]
                continue
            nxt = routes[vid][st.pos[vid] + 1]
            st.queues[e].setdefault(nxt, deque()).append((st.seq, vid))
            st.seq += 1
            st.q_edge[e] += 1
        # 3. signals and discharge
        for i, pm in enumerate(st.phases):
            before = pm.mode
            stage = pm.begin_tick()
            if p.record_phases and pm.mode != before:
                st.phase_log.append((t * p.tick_s, i, pm.mode, pm.stage))
            served = g.stage_edges[i][stage] if stage is not None else ()
            for e in g.incoming[i]:
                if e not in served or st.q_edge[e] == 0:
                    st.credit[e] = 0.0
                    continue
                st.credit[e] += self.cap_per_tick[e]
                while st.credit[e] >= 1.0 and st.q_edge[e] > 0:
                    self._discharge(e, t)
                    st.credit[e] -= 1.0
                if st.q_edge[e] == 0:
                    st.credit[e] = 0.0
            if pm.end_tick(p.tick_s) and p.record_phases:
                st.phase_log.append(((t + 1) * p.tick_s, i, pm.mode, pm.stage))
        # 4. waiting
        w = (g.incidence @ st.q_edge) * p.tick_s
        st.wait_step += w
        st.wait_total += w
        st.tick += 1

    def _discharge(self, e: int, t: int):
        st = self.state
        queues = st.queues[e]
        head = min((q[0][0], nxt) for nxt, q in queues.items() if q)
        nxt = head[1]
        _, vid = queues[nxt].popleft()
        st.q_edge[e] -= 1
        st.n_edge[e] -= 1
        st.pos[vid] += 1
        self._enter_edge(vid, nxt, t)

    def _check_conservation(self):
        st = self.state
        moving = st.in_transit
        queued = int(st.q_edge.sum())
        if st.entered != moving + queued + st.exited:
            raise InvariantError(
                f"vehicle conservation violated: entered={st.entered} transit={moving} "
                f"queued={queued} exited={st.exited}"
            )
        if int(st.n_edge.sum()) != moving + queued:
            raise InvariantError("per-edge counts disagree with vehicle records")


def phase_violations(phase_log, n_agents: int, yellow_s: float = 2.0, g_min_s: float = 5.0,
                     g_max_s: float = 50.0, end_time: float = None):
    """Check a phase log for interlock and dwell violations.

    ``phase_log`` rows are ``(time_s, agent, mode, stage)`` transitions with
    an initial green row per agent. Returns a list of human-readable
    violations (empty when the trace is safe). The final, still-open green of
    each agent is only checked against ``g_max``.
    """
    out = []
    by_agent = {i: [] for i in range(n_agents)}
    for row in phase_log:
        by_agent[row[1]].append(row)
    for i, rows in by_agent.items():
        rows = sorted(rows, key=lambda r: r[0])
        for a, b in zip(rows, rows[1:]):
            dur = b[0] - a[0]
            if a[2] == GREEN:
                if b[2] != YELLOW:
                    out.append(f"agent {i}: green at {a[0]} not followed by yellow")
                if not (g_min_s - 1e-9 <= dur <= g_max_s + 1e-9):
                    out.append(f"agent {i}: green dwell {dur}s at {a[0]}")
            else:
                if b[2] != GREEN or abs(dur - yellow_s) > 1e-9:
                    out.append(f"agent {i}: yellow of {dur}s at {a[0]}")
                if b[3] == a[3]:
                    out.append(f"agent {i}: yellow at {a[0]} returned to the same stage")
        if rows and end_time is not None and rows[-1][2] == GREEN and end_time - rows[-1][0] > g_max_s + 1e-9:
            out.append(f"agent {i}: open green exceeds g_max")
    return out


@dataclass
class Trace:
    """Per-decision-step record of an episode."""

    dt: float
    Q: List[np.ndarray] = field(default_factory=list)
    W: List[np.ndarray] = field(default_factory=list)
    phase: List[np.ndarray] = field(default_factory=list)
    density: List[np.ndarray] = field(default_factory=list)
    aborted: bool = False
    error: Optional[str] = None

    def record(self, sim: Simulator):
        st = sim.state
        self.Q.append(sim.queue_lengths())
        self.W.append(st.wait_step.copy())
        self.phase.append(np.array([pm.stage if pm.mode == GREEN else -1 - pm.stage for pm in st.phases]))
        self.density.append(sim.densities())

    def __len__(self) -> int:
        return len(self.W)

    def total_wait(self) -> np.ndarray:
        """Network-wide waiting seconds per step."""
        return np.array([w.sum() for w in self.W])

    def write_csv(self, path, intersection_ids: Sequence[str]):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "intersection", "phase", "Q_i", "W_i"])
            for k in range(len(self)):
                for i, nid in enumerate(intersection_ids):
                    w.writerow([k, nid, int(self.phase[k][i]), int(self.Q[k][i]), repr(float(self.W[k][i]))])

    def write_density_csv(self, path, edge_ids: Sequence[str]):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "edge", "density"])
            for k in range(len(self)):
                for j, eid in enumerate(edge_ids):
                    w.writerow([k, eid, repr(float(self.density[k][j]))])
