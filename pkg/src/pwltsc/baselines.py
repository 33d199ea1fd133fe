"""Reference controllers: fixed-time control, IPPO, and the reward ablation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .env import EnvConfig, TrafficEnv
from .errors import ConfigError
from .trafficsim import N_STAGES


def fixed_time_policy(green_elapsed_s: float, green_s: float = 25.0) -> int:
    """Round-robin stage after ``green_elapsed_s`` seconds of accumulated green.

    >>> fixed_time_policy(0.0), fixed_time_policy(26.0), fixed_time_policy(101.0)
    (0, 1, 0)
    """
    return int(green_elapsed_s // green_s) % N_STAGES


@dataclass
class FixedTimeProgram:
    """Four stages of ``green_s`` seconds each, yellows inserted by the signal head.

    Because every green lasts exactly ``green_s`` and every yellow
    ``yellow_s``, the accumulated green time is a function of the clock alone,
    so all intersections run the same program independent of traffic.
    """

    green_s: float = 25.0
    yellow_s: float = 2.0
    g_min_s: float = 5.0
    g_max_s: float = 50.0

    def __post_init__(self):
        if not (self.g_min_s <= self.green_s <= self.g_max_s):
            raise ConfigError(f"fixed green {self.green_s}s outside [{self.g_min_s}, {self.g_max_s}]")

    @property
    def cycle_s(self) -> float:
        return N_STAGES * (self.green_s + self.yellow_s)

    def green_elapsed(self, clock_s: float) -> float:
        slot = self.green_s + self.yellow_s
        return self.green_s * (clock_s // slot) + min(clock_s % slot, self.green_s)

    def stage_at(self, clock_s: float) -> int:
        return fixed_time_policy(self.green_elapsed(clock_s), self.green_s)

    # policy protocol used by run_episode
    def __call__(self, obs, env: TrafficEnv) -> np.ndarray:
        return np.full(env.N, self.stage_at(env.clock()), dtype=np.int64)

    def on_tick(self, sim) -> None:
        stage = self.stage_at(sim.state.tick * sim.params.tick_s)
        for pm in sim.state.phases:
            pm.request = stage


def fixed_program_for(env_config: EnvConfig, green_s: float = 25.0) -> FixedTimeProgram:
    sp = env_config.sim
    return FixedTimeProgram(green_s, sp.yellow_s, sp.g_min_s, sp.g_max_s)


def reward_ablation_flag(config: EnvConfig) -> EnvConfig:
    """Copy of ``config`` whose environment pays ``Q_i(k-1) - Q_i(k)``."""
    return dataclasses.replace(config, reward="queue_difference")


def ippo_trainer(graph, config, **kwargs):
    """Train with the influence mechanism disabled (per-agent critics on own embeddings)."""
    from .marl import train

    return train(graph, config, influence=None, method="ippo", **kwargs)
