"""One decision step under each baseline.

The same channel draw is shown to Random, Max Rate and Max Features; for
each we print the chosen RBs and powers, the resulting rates, how many
feature cells each link can carry, and the reward.

    python3 demos/02_one_step.py
"""
import numpy as np

from v2ialloc.env import CoopPerceptionEnv
from v2ialloc.runner import build_policies, channel_seed_for

seed = 2_000_001
env = CoopPerceptionEnv()
policies = build_policies(["random", "max_rate", "max_features"], env.channel_params, env.n_cavs)

for name, policy in policies.items():
    env.reset(seed, channel_seed_for(seed))
    if name == "random":
        policy.rng = np.random.default_rng(0)
    alloc = policy.allocate(env)
    res = env.step(alloc)
    info = res.info
    print(f"\n{name}")
    for m in range(env.n_cavs):
        print(f"  CAV {m + 1}: RB {info.rbs[m]}  {info.power_dbm[m]:6.1f} dBm  "
              f"{info.rates_bps[m] / 1e6:6.2f} Mbit/s  budget {info.budgets[m]:5.1f}  "
              f"sent {info.cells_sent[m]}")
    print(f"  L_det {info.loss_before.det:.4f} -> {info.loss_after.det:.4f}, "
          f"reward {res.reward:.3f}")
