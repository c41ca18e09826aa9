"""A full 200 ms perception period, step by step.

Follows Max Rate and Max Features through the same episode and prints how
detection loss and precision evolve as features accumulate at the RSU.

    python3 demos/03_episode_walkthrough.py
"""
from v2ialloc.env import CoopPerceptionEnv
from v2ialloc.runner import build_policies, run_episode

seed = 2_000_002
env = CoopPerceptionEnv()
policies = build_policies(["max_rate", "max_features"], env.channel_params, env.n_cavs)

for name, policy in policies.items():
    trace = []
    run_episode(env, policy, seed,
                check=lambda e, a, r: trace.append((r.info.t, r.info.loss_after.det,
                                                    e.average_precision()[0.5],
                                                    r.info.cells_sent.sum())))
    print(f"\n{name}: step  L_det   AP@0.5  cells")
    for t, loss, ap, cells in trace[::5] + [trace[-1]]:
        print(f"        {t:4d}  {loss:.4f}  {ap:.3f}  {cells:5d}")
