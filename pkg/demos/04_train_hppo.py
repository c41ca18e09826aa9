"""Train the hierarchical PPO agent and compare it with the baselines.

The default 300 episodes take about a minute and show the learning trend;
pass 2000 for the full desk-scale run.

    python3 demos/04_train_hppo.py [episodes]
"""
import sys

from v2ialloc.agents import HPPOConfig
from v2ialloc.env import CoopPerceptionEnv
from v2ialloc.runner import (build_policies, evaluate_policy, summarize, test_seeds,
                             train_hppo, validation_seeds)

episodes = int(sys.argv[1]) if len(sys.argv) > 1 else 300
env = CoopPerceptionEnv()
agent, log = train_hppo(env, HPPOConfig(), episodes=episodes, valid_seeds=validation_seeds(),
                        eval_every=max(episodes // 6, 1),
                        progress=lambda ep, ret: print(f"episode {ep:5d}  validation return {ret:7.2f}"))

policies = build_policies(["random", "max_rate", "max_features"], env.channel_params, env.n_cavs)
policies["hppo"] = agent
print("\npolicy         return   AP@0.5  AP@0.7   (50 test seeds)")
for name, policy in policies.items():
    s = summarize(evaluate_policy(env, policy, test_seeds(50)))
    print(f"{name:13s} {s['total_return']:7.2f}  {s['ap50']:.3f}   {s['ap70']:.3f}")
