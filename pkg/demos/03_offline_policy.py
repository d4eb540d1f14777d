"""Log exploratory traffic, refine both heads offline and compare against fixed policies.

Run: python demos/03_offline_policy.py   (one to two minutes)
"""
# %% Replay logged by the supervised head with uniform route exploration
import numpy as np

from dualpilot.policy import CqlConfig, GreedyPolicy, compute_reward, constant_policies, tool_call_rate
from dualpilot.simulation import World, collect_world_replay, compare_policies, train_dual_policy

world = World.shipped()
replay = collect_world_replay(world, seed=0)
rewards = np.array([compute_reward(t) for t in replay])
print(f"{len(replay)} tuples, mean reward {rewards.mean():.3f}")

# %% Conservative Q-learning on the routing head and a fresh tool head
res = train_dual_policy(world, replay, CqlConfig())
print(f"held-out value: behaviour {res.behavior_value:.3f}, "
      f"before {res.pre_value:.3f}, after {res.post_value:.3f}")
print(f"tool-call rate on the replay: {tool_call_rate(res.tool_weights, replay):.3f}")

# %% Online comparison on the test split with shared random streams
trained = GreedyPolicy(res.route_weights, res.tool_weights)
trained.name = "trained"
evals = compare_policies(world, [trained] + constant_policies())
for e in sorted(evals, key=lambda e: -e.j)[:6]:
    print(f"{e.name:>28}: J={e.j:.4f} success={e.success_rate:.3f} latency={e.mean_latency_s:.2f}s")
