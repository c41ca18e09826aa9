"""How much does extra spectrum help?

Evaluates the three baselines at a few total bandwidths on paired seeds.
More bandwidth means larger feature budgets and higher precision for all.

    python3 demos/05_bandwidth_sweep.py
"""
import dataclasses

from v2ialloc.channel import ChannelParams
from v2ialloc.env import CoopPerceptionEnv
from v2ialloc.runner import build_policies, evaluate_policy, summarize, test_seeds

seeds = test_seeds(30)
print("bandwidth   " + "  ".join(f"{n:>12s}" for n in ("random", "max_rate", "max_features")))
for mhz in (2.5, 3.0, 3.5):
    channel = dataclasses.replace(ChannelParams(), total_bandwidth_hz=mhz * 1e6)
    env = CoopPerceptionEnv(channel_params=channel)
    cells = []
    for policy in build_policies(["random", "max_rate", "max_features"], channel,
                                 env.n_cavs).values():
        cells.append(f"{summarize(evaluate_policy(env, policy, seeds))['ap50']:12.3f}")
    print(f"{mhz:5.1f} MHz   " + "  ".join(cells))
