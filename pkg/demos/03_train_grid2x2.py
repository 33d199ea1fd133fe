"""Train the influence-weighted actor-critic on the 2x2 grid.

Steps: pre-train the EHH influence module on random-policy rollouts, train
for 100 episodes, evaluate greedily on held-out demand seeds and compare
with fixed-time control and IPPO. Curves and figures land in
``runs/demo_grid2x2``. Takes a few minutes on one core; pass a smaller
episode count as the first argument for a quick look.

    python3 demos/03_train_grid2x2.py [episodes]
"""

import dataclasses
import sys
from pathlib import Path

from pwltsc.baselines import fixed_program_for
from pwltsc.config import load_config
from pwltsc.marl import episode_seeds, evaluate_policy, pretrain_ehh, train
from pwltsc.plotting import plot_curves

cfg = load_config(Path(__file__).resolve().parent.parent / "configs" / "grid2x2.json")
trainer = cfg.trainer_config()
if len(sys.argv) > 1:
    trainer = dataclasses.replace(trainer, episodes=int(sys.argv[1]))
graph, env_cfg = cfg.graph(), cfg.mdp.env_config()
out = Path("runs/demo_grid2x2")
out.mkdir(parents=True, exist_ok=True)

influence = pretrain_ehh(graph, env_cfg, cfg.pretrain.episodes, cfg.seed)
print("influence module:", {k: round(v, 3) for k, v in influence.report.items()})


def show(row):
    if row["episode"] % 10 == 9:
        print(f"  episode {row['episode'] + 1:3d}: reward {row['global_reward']:8.0f}  AVE {row['AVE']:6.2f}")


runs = {}
for method, inf in (("ours", influence), ("ippo", None)):
    print(f"training {method}")
    runs[method] = train(graph, trainer, env_cfg, inf, method, progress=show)
    runs[method].write_curve(out / f"curve_{method}.csv")

seeds = episode_seeds(cfg.seed, cfg.eval.episodes, 1)
print("\nevaluation over", len(seeds), "held-out demand seeds")
policies = {"fixed-time": fixed_program_for(env_cfg), **{m: r.agent.greedy_policy() for m, r in runs.items()}}
for name, policy in policies.items():
    res = evaluate_policy(graph, env_cfg, policy, seeds)
    print(f"{name:>10}: AVE {res['AVE']:6.2f}  STA {res['STA']:7.2f}")

for p in plot_curves([out / "curve_ours.csv", out / "curve_ippo.csv"], out, ["ours", "IPPO"]):
    print("wrote", p)
