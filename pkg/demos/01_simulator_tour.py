"""A first look at the queue simulator.

Runs three hand-written controllers on the 2x2 grid and prints the average
waiting time (AVE) and its spread (STA) over five demand seeds:

* the 25 s fixed-time program,
* uniformly random stage requests,
* a longest-queue-first rule that always asks for the stage with most
  queued vehicles.

    python3 demos/01_simulator_tour.py
"""

import numpy as np

from pwltsc.baselines import fixed_program_for
from pwltsc.env import EnvConfig, TrafficEnv, run_episode
from pwltsc.marl import episode_seeds, evaluate_policy
from pwltsc.trafficsim import N_STAGES, SimParams, load_network, phase_violations

graph = load_network("grid2x2")
env_cfg = EnvConfig()
print(f"{graph.N} intersections, {graph.n_edges} edges, {len(graph.source_edges)} demand sources")

# An observation row is [stage one-hot (4), queue per approach (D), density per approach (D)].
D = graph.max_in_degree


def longest_queue_first(obs, env):
    q = obs[:, N_STAGES : N_STAGES + D]
    per_stage = np.einsum("nd,nds->ns", q, graph.membership)
    return per_stage.argmax(axis=1)


rng = np.random.default_rng(0)
controllers = {
    "fixed-time 25 s": fixed_program_for(env_cfg),
    "random": lambda obs, env: rng.integers(0, N_STAGES, env.N),
    "longest queue first": longest_queue_first,
}

seeds = episode_seeds(0, 5, 1)
for name, policy in controllers.items():
    res = evaluate_policy(graph, env_cfg, policy, seeds)
    print(f"{name:>22}: AVE {res['AVE']:7.2f}   STA {res['STA']:8.2f}   reward {res['global_reward']:9.0f}")

# The signal heads enforce yellow and min/max green whatever the controller asks for.
env = TrafficEnv(graph, EnvConfig(sim=SimParams(record_phases=True)))
run_episode(env, controllers["random"], seed=1)
st = env.sim.state
print("phase-safety violations under random control:", len(phase_violations(st.phase_log, graph.N, end_time=st.tick)))
print(f"vehicles entered {st.entered}, exited {st.exited}, still inside {st.in_transit + st.queued}")
