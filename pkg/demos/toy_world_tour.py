"""
A tour of the toy bimanual world
================================

Two planar three-link arms share a table. In ``toy_transfer`` the left arm
picks up a cube and hands it to the right arm. In ``toy_slot`` both arms
must hold a rod by its ends and lower it into a slot.
"""

import numpy as np

from interact import sim

# Every episode layout is a pure function of the seed.
state = sim.reset("toy_slot", 3)
print("rod centre", state.obj, "slot x", round(state.slot_x, 3))
print("joint vector (arm 1 then arm 2, gripper last):", np.round(state.qpos, 3))

# The scripted controller follows waypoints through inverse kinematics.
outcome, states = sim.rollout(sim.ScriptedAgent("toy_slot"), "toy_slot", 3, record=True)
print("stages reached:", outcome.stages)

# Stage flags over time, so we can see when each subtask first succeeds.
for stage in sim.TASKS["toy_slot"].stages:
    first = next(s.t for s in states if s.stages[stage])
    print(f"{stage:>7} first true at tick {first}")

# Observations are 64x64 grayscale renders.
frame = sim.render(states[-1])
print("frame", frame.shape, "min", frame.min(), "max", frame.max())

# ASCII preview, max-pooled 4x2 so thin links survive; row 0 is the top of the view.
for row in frame.reshape(16, 4, 32, 2).max(axis=(1, 3)):
    print("".join(" .:-=+*#%@"[int(v * 9)] for v in row))

# A scripted expert with small joint noise still solves both tasks;
# a uniformly random policy almost never does.
for task in sim.TASKS:
    scripted = sim.evaluate(sim.ScriptedAgent(task, noise=0.01), task, 20, seeds=range(20))
    random = sim.evaluate(sim.RandomAgent(), task, 20, seeds=range(20))
    print(task, "scripted", scripted.rates, "random", random.rates)
