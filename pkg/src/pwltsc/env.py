"""Multi-agent signal-control environment on top of :mod:`pwltsc.trafficsim`.

Each agent observes ``[one-hot stage, queue per incoming edge, density per
incoming edge]`` with edges zero-padded to the network's largest in-degree,
picks a desired stage in ``{0, 1, 2, 3}``, and is rewarded by the piecewise
queue reward (or the plain queue-difference reward for ablations).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError
from .trafficsim import N_STAGES, SimParams, Simulator, Trace, TrafficGraph, generate_demand
from .trafficsim.demand import RouteTable


@dataclass
class RewardParams:
    kappa1: float = 25.0
    kappa2: float = 5.0
    kappa3: float = 5.0

    def __post_init__(self):
        bad = [k for k, v in vars(self).items() if not v > 0]
        if bad:
            raise ConfigError(f"reward parameters must be > 0: {bad}")


def reward(Q_now, Q_prev, W_now, params: RewardParams = RewardParams()) -> np.ndarray:
    """Piecewise per-agent reward; the empty-queue branch takes precedence.

    >>> reward([0, 3, 2, 4], [1, 1, 5, 4], [0.0, 10.0, 7.0, 20.0]).tolist()
    [25.0, -2.0, 15.0, -0.0]
    """
    Q_now = np.asarray(Q_now, dtype=np.float64)
    dQ = Q_now - np.asarray(Q_prev, dtype=np.float64)
    W_now = np.asarray(W_now, dtype=np.float64)
    return np.where(
        Q_now == 0,
        params.kappa1,
        np.where(dQ > 0, -W_now / params.kappa2, -params.kappa3 * dQ),
    )


def queue_difference_reward(Q_now, Q_prev) -> np.ndarray:
    """``X(k-1) - X(k)`` with the queue total as traffic variable."""
    return np.asarray(Q_prev, dtype=np.float64) - np.asarray(Q_now, dtype=np.float64)


def global_reward(rewards) -> float:
    return float(np.sum(rewards))


@dataclass
class EnvConfig:
    dt: float = 5.0
    horizon_s: float = 2500.0
    reward: str = "piecewise"  # or "queue_difference"
    reward_params: RewardParams = field(default_factory=RewardParams)
    sim: SimParams = field(default_factory=SimParams)
    demand_scale: float = 1.0

    def __post_init__(self):
        if self.reward not in ("piecewise", "queue_difference"):
            raise ConfigError(f"unknown reward {self.reward!r}")
        if self.dt <= 0 or self.horizon_s <= 0:
            raise ConfigError("dt and horizon must be positive")
        if self.demand_scale < 0:
            raise ConfigError("demand_scale must be >= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon_s / self.dt))


def observe(sim: Simulator) -> np.ndarray:
    """Observation matrix ``(N, 4 + 2 * max_in_degree)``."""
    g = sim.graph
    D = g.max_in_degree
    obs = np.zeros((g.N, N_STAGES + 2 * D))
    dens = sim.densities()
    for i, (pm, inc) in enumerate(zip(sim.state.phases, g.incoming)):
        obs[i, pm.stage] = 1.0
        n = len(inc)
        obs[i, N_STAGES : N_STAGES + n] = sim.state.q_edge[inc]
        obs[i, N_STAGES + D : N_STAGES + D + n] = dens[inc]
    return obs


def split_observation(obs: np.ndarray, max_in_degree: int):
    """``(stage one-hot, queues, densities)`` views of an observation array."""
    D = max_in_degree
    return obs[..., :N_STAGES], obs[..., N_STAGES : N_STAGES + D], obs[..., N_STAGES + D :]


@dataclass
class Transitions:
    """Per-step, per-agent records of one episode."""

    obs: np.ndarray  # (T, N, W)
    actions: np.ndarray  # (T, N)
    rewards: np.ndarray  # (T, N)
    next_obs: np.ndarray  # (T, N, W)
    episode: int = 0

    def __len__(self) -> int:
        return self.actions.shape[0]

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for k in range(len(self)):
                rec = {
                    "k": k,
                    "o": self.obs[k].tolist(),
                    "a": self.actions[k].tolist(),
                    "r": self.rewards[k].tolist(),
                    "global_r": float(self.rewards[k].sum()),
                }
                fh.write(json.dumps(rec) + "\n")


class TrafficEnv:
    def __init__(self, graph: TrafficGraph, config: EnvConfig = None):
        self.graph = graph
        self.config = config or EnvConfig()
        self.routes = RouteTable(graph)
        self.rates = graph.source_rates * self.config.demand_scale
        self.sim = Simulator(graph, generate_demand(graph, 0, 0.0, self.rates, self.config.sim.tick_s), self.config.sim)
        self._Q_prev = np.zeros(graph.N)

    @property
    def N(self) -> int:
        return self.graph.N

    @property
    def obs_width(self) -> int:
        return N_STAGES + 2 * self.graph.max_in_degree

    def reset(self, seed: int) -> np.ndarray:
        sched = generate_demand(
            self.graph, seed, self.config.horizon_s, self.rates, self.config.sim.tick_s, routes=self.routes
        )
        self.sim.reset(sched)
        self._Q_prev = np.zeros(self.graph.N)
        return observe(self.sim)

    def observe(self) -> np.ndarray:
        return observe(self.sim)

    def apply_actions(self, actions):
        return self.sim.apply_actions(actions)

    def step(self, actions, tick_hook=None):
        self.sim.step(actions, self.config.dt, tick_hook)
        Q = self.sim.queue_lengths().astype(np.float64)
        W = self.sim.state.wait_step.copy()
        if self.config.reward == "piecewise":
            r = reward(Q, self._Q_prev, W, self.config.reward_params)
        else:
            r = queue_difference_reward(Q, self._Q_prev)
        self._Q_prev = Q
        return observe(self.sim), r, {"Q": Q, "W": W}

    def clock(self) -> float:
        return self.sim.state.tick * self.config.sim.tick_s


Policy = Callable[[np.ndarray, "TrafficEnv"], np.ndarray]


def run_episode(env: TrafficEnv, policy: Policy, seed: int, episode: int = 0):
    """Roll one episode; returns ``(trace, transitions)``.

    If the policy raises, the episode stops there and the returned trace has
    ``aborted=True`` and ``error`` set.
    """
    obs = env.reset(seed)
    T = env.config.n_steps
    trace = Trace(env.config.dt)
    O = np.zeros((T, env.N, env.obs_width))
    A = np.zeros((T, env.N), dtype=np.int64)
    R = np.zeros((T, env.N))
    O2 = np.zeros_like(O)
    hook = getattr(policy, "on_tick", None)
    for k in range(T):
        try:
            a = np.asarray(policy(obs, env), dtype=np.int64)
        except Exception as exc:  # noqa: BLE001 - any policy failure aborts the episode
            trace.aborted = True
            trace.error = f"{type(exc).__name__}: {exc}"
            sl = slice(0, k)
            return trace, Transitions(O[sl], A[sl], R[sl], O2[sl], episode)
        nxt, r, _ = env.step(a, hook)
        trace.record(env.sim)
        O[k], A[k], R[k], O2[k] = obs, a, r, nxt
        obs = nxt
    return trace, Transitions(O, A, R, O2, episode)
