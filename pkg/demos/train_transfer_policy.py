"""
Training a policy on ten handovers
==================================

Ten noiseless scripted demonstrations of the cube handover, 2000 Adam
steps on the desk-sized model, then closed-loop rollouts with temporal
ensembling. Takes a couple of minutes on one core.

Pass a step count as the first argument for a quicker look.
"""

import sys

import numpy as np

from interact import sim
from interact.config import profile
from interact.policy import EnsemblePolicy, smoothed, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
demos = [sim.generate_demo("toy_transfer", seed) for seed in range(1000, 1010)]
print(len(demos), "demos of", demos[0].length, "ticks;", "image", demos[0].image.shape[1:])

cfg = profile("desk").replace(steps=steps)
result = train(demos, cfg, progress=lambda r: r["step"] % 250 == 0 and print(
    f"step {r['step']:5d}  l1 {r['l1']:.4f}  kl {r['kl']:.4f}"))

l1 = np.array([r["l1"] for r in result.metrics])
print(f"L1 went from {l1[0]:.3f} to {smoothed(l1)[-1]:.3f} (50-step running mean)")

# z = 0 at inference; every tick queries a fresh chunk and blends the overlap.
policy = EnsemblePolicy(result.model, result.stats)
report = sim.evaluate(policy, "toy_transfer", 20, seeds=range(5000, 5020))
print("success over 20 unseen layouts:", report.rates)
