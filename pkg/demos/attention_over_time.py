"""
Where does each arm look?
=========================

Each arm's decoder cross-attends to its own joint tokens, the other arm's
CLS summary, and the image tokens. Tracking the share of attention spent
on the other arm's CLS tokens over an episode shows when the arms lean
on each other. This briefly trains a slot-insertion policy, then rolls it
out and prints the head-averaged share per tick.
"""

import sys

import numpy as np

from interact import sim
from interact.config import profile
from interact.policy import EnsemblePolicy, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
demos = [sim.generate_demo("toy_slot", seed) for seed in range(1000, 1050)]
cfg = profile("desk").replace(steps=steps, chunk_size=20)
result = train(demos, cfg)

policy = EnsemblePolicy(result.model, result.stats, keep_traces=True)
outcome, _ = sim.rollout(policy, "toy_slot", 5000)
print("stages:", outcome.stages)

# (ticks, arm, layer, head) -> average over heads, last decoder layer
mass = np.stack([trace.cls_mass()[0] for trace in policy.traces])
share = mass[:, :, -1].mean(axis=-1)
for t in range(0, len(share), 5):
    bars = ["#" * int(40 * share[t, arm]) for arm in range(2)]
    print(f"t={t:3d}  arm1 {share[t, 0]:.3f} {bars[0]:<40}  arm2 {share[t, 1]:.3f} {bars[1]}")

# The same numbers, per head and layer, come out of `interact attn-trace` as CSV.
