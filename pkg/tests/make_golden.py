"""Regenerate tests/data/golden_rollouts.npz (only after an intentional dynamics change)."""

from pathlib import Path

import numpy as np

from interact import sim

OUT = Path(__file__).parent / "data" / "golden_rollouts.npz"


def record(task, seed, noise, length=200):
    _, states = sim.rollout(sim.ScriptedAgent(task, noise), task, seed, length=length, record=True)
    return {
        f"{task}_qpos": np.stack([s.qpos for s in states]),
        f"{task}_obj": np.stack([s.obj for s in states]),
        f"{task}_attached": np.array([s.attached for s in states], dtype=np.int8),
        f"{task}_final_image": sim.render(states[-1]),
    }


def main():
    arrays = {}
    arrays.update(record("toy_transfer", 7, 0.01))
    arrays.update(record("toy_slot", 7, 0.01))
    OUT.parent.mkdir(exist_ok=True)
    np.savez(OUT, **arrays)


if __name__ == "__main__":
    main()
