"""A deterministic planar two-arm world with two coordination tasks.

Each arm has three revolute joints and a gripper scalar in [0, 1] (closed at
>= 0.5). Arms are kinematic: joints move toward their targets at a bounded
speed. Objects are gravity-free and only move while attached to a closed
gripper.

Tasks
-----
toy_transfer
    Arm 1 picks a cube off the table, lifts it to a hand-over point, arm 2
    grasps it and arm 1 lets go. Stages: touch, lift, transfer.
toy_slot
    Both arms grasp the two ends of a rod, lift it together, carry it over a
    slot and lower it in. The rod only moves while both ends are held and
    slips out if the grippers pull it apart. Stages: lift, insert.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .dataio import DemoEpisode
from .errors import UsageError
from .tensor import Streams

J_PER_ARM = 4
BASES = np.array([[-0.65, 0.55], [0.65, 0.55]])
LINKS = np.array([0.40, 0.35, 0.10])
JOINT_LIMITS = np.tile([-1.5 * np.pi, 1.5 * np.pi], (3, 1))
MAX_JOINT_SPEED = 0.1       # rad per tick
MAX_GRIPPER_SPEED = 0.25    # per tick
GRASP_RADIUS = 0.07
CLOSED = 0.5
LIFT_HEIGHT = 0.2
TABLE_Y = 0.03
ROD_HALF = 0.2
ROD_STRAIN = 0.08
SLOT_TOL_X = 0.04
SLOT_TOP = 0.08
TICK_HZ = 50
HOME = np.array([[-0.40, 0.35], [0.40, 0.35]])
IMAGE_SIZE = 64
VIEW_X = (-1.0, 1.0)
VIEW_Y = (-0.2, 1.0)


@dataclass(frozen=True)
class TaskSpec:
    name: str
    length: int
    object_x: tuple
    slot_x: tuple | None
    stages: tuple


TASKS = {
    "toy_transfer": TaskSpec("toy_transfer", 100, (-0.45, -0.30), None, ("touch", "lift", "transfer")),
    "toy_slot": TaskSpec("toy_slot", 100, (-0.12, -0.02), (0.08, 0.16), ("lift", "insert")),
}


def get_task(task) -> TaskSpec:
    if isinstance(task, TaskSpec):
        return task
    try:
        return TASKS[task]
    except KeyError:
        raise UsageError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None


@dataclass
class ToyWorld:
    task: TaskSpec
    qpos: np.ndarray                 # (8,) arm1 [q1 q2 q3 g], arm2 [q1 q2 q3 g]
    obj: np.ndarray                  # cube position or rod centroid
    slot_x: float
    attached: list = field(default_factory=lambda: [False, False])
    offsets: list = field(default_factory=lambda: [np.zeros(2), np.zeros(2)])
    stages: dict = field(default_factory=dict)
    t: int = 0
    layout: dict = field(default_factory=dict)
    seed: int = 0

    def copy(self) -> "ToyWorld":
        return dataclasses.replace(
            self, qpos=self.qpos.copy(), obj=self.obj.copy(), attached=list(self.attached),
            offsets=[o.copy() for o in self.offsets], stages=dict(self.stages), layout=dict(self.layout))


# ---------------------------------------------------------------- kinematics


def forward_kinematics(base, q):
    """Joint positions [base, elbow, wrist, tip] for angles q (3,)."""
    angles = np.cumsum(q[:3])
    pts = [np.asarray(base, dtype=np.float64)]
    for length, a in zip(LINKS, angles):
        pts.append(pts[-1] + length * np.array([np.cos(a), np.sin(a)]))
    return np.stack(pts)


def end_effector(state: ToyWorld, arm: int) -> np.ndarray:
    q = state.qpos[arm * J_PER_ARM:(arm + 1) * J_PER_ARM]
    return forward_kinematics(BASES[arm], q)[-1]


def inverse_kinematics(arm: int, target, tip_angle: float = -np.pi / 2, reference=None) -> np.ndarray:
    """Elbow-up joint angles placing the tip at ``target`` pointing along ``tip_angle``.

    Each angle is shifted by a multiple of 2*pi to lie nearest ``reference``
    (default: the arm's home pose), which keeps scripted trajectories continuous.
    """
    l1, l2, l3 = LINKS
    wrist = np.asarray(target, dtype=np.float64) - l3 * np.array([np.cos(tip_angle), np.sin(tip_angle)])
    d = wrist - BASES[arm]
    r = np.clip(np.hypot(*d), abs(l1 - l2) + 1e-6, l1 + l2 - 1e-6)
    c2 = np.clip((r * r - l1 * l1 - l2 * l2) / (2 * l1 * l2), -1.0, 1.0)
    best = None
    for sign in (1.0, -1.0):
        q2 = sign * np.arccos(c2)
        q1 = np.arctan2(d[1], d[0]) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
        elbow_y = BASES[arm][1] + l1 * np.sin(q1)
        if best is None or elbow_y > best[0]:
            best = (elbow_y, q1, q2)
    _, q1, q2 = best
    q3 = tip_angle - q1 - q2
    q = np.array([q1, q2, q3])
    if reference is None:
        reference = _HOME_Q[arm] if _HOME_Q is not None else np.zeros(3)
    return q - 2 * np.pi * np.round((q - reference) / (2 * np.pi))


_HOME_Q = None
_HOME_Q = [inverse_kinematics(a, HOME[a], reference=np.zeros(3)) for a in range(2)]


def _grasp_points(state: ToyWorld):
    if state.task.name == "toy_slot":
        off = np.array([ROD_HALF, 0.0])
        return [state.obj - off, state.obj + off]
    return [state.obj, state.obj]


# ---------------------------------------------------------------- dynamics


def reset(task, seed: int) -> ToyWorld:
    spec = get_task(task)
    rng = Streams(seed).generator(f"reset/{spec.name}")
    ox = rng.uniform(*spec.object_x)
    sx = rng.uniform(*spec.slot_x) if spec.slot_x else 0.0
    qpos = np.zeros(2 * J_PER_ARM)
    for arm in range(2):
        qpos[arm * J_PER_ARM:arm * J_PER_ARM + 3] = inverse_kinematics(arm, HOME[arm])
    state = ToyWorld(spec, qpos, np.array([ox, TABLE_Y]), float(sx), seed=int(seed),
                     layout={"object_x": float(ox), "slot_x": float(sx)})
    state.stages = {name: False for name in spec.stages}
    return state


def step(state: ToyWorld, action) -> ToyWorld:
    """Advance one tick toward the joint targets in ``action`` (length 8)."""
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (2 * J_PER_ARM,):
        raise UsageError(f"action must have {2 * J_PER_ARM} entries, got {action.shape}")
    action = np.where(np.isfinite(action), action, state.qpos)
    new = state.copy()
    ee_before = [end_effector(state, a) for a in range(2)]
    for arm in range(2):
        sl = slice(arm * J_PER_ARM, arm * J_PER_ARM + 3)
        delta = np.clip(action[sl] - state.qpos[sl], -MAX_JOINT_SPEED, MAX_JOINT_SPEED)
        new.qpos[sl] = np.clip(state.qpos[sl] + delta, JOINT_LIMITS[:, 0], JOINT_LIMITS[:, 1])
        g = arm * J_PER_ARM + 3
        dg = np.clip(action[g] - state.qpos[g], -MAX_GRIPPER_SPEED, MAX_GRIPPER_SPEED)
        new.qpos[g] = np.clip(state.qpos[g] + dg, 0.0, 1.0)
    ee_after = [end_effector(new, a) for a in range(2)]

    held = [a for a in range(2) if state.attached[a]]
    if state.task.name == "toy_slot":
        if len(held) == 2:
            new.obj = state.obj + 0.5 * ((ee_after[0] - ee_before[0]) + (ee_after[1] - ee_before[1]))
            grip_gap = np.hypot(*(ee_after[1] - ee_after[0]))
            if abs(grip_gap - 2 * ROD_HALF) > ROD_STRAIN:
                new.attached = [False, False]
    elif held:
        new.obj = state.obj + sum(ee_after[a] - ee_before[a] for a in held) / len(held)

    points = _grasp_points(new)
    for arm in range(2):
        closed = new.qpos[arm * J_PER_ARM + 3] >= CLOSED
        if not closed:
            new.attached[arm] = False
        elif not new.attached[arm] and np.hypot(*(ee_after[arm] - points[arm])) <= GRASP_RADIUS:
            new.attached[arm] = True
    new.t = state.t + 1
    _update_stages(new, ee_after)
    return new


def _update_stages(state: ToyWorld, ee):
    s = state.stages
    if state.task.name == "toy_transfer":
        touch = np.hypot(*(ee[0] - state.obj)) <= GRASP_RADIUS
        lift = state.attached[0] and state.obj[1] > LIFT_HEIGHT
        transfer = state.attached[1] and not state.attached[0]
        s["touch"] = bool(s["touch"] or touch)
        s["lift"] = bool(s["lift"] or (s["touch"] and lift))
        s["transfer"] = bool(s["transfer"] or (s["lift"] and transfer))
    else:
        lift = all(state.attached) and state.obj[1] > LIFT_HEIGHT
        inside = abs(state.obj[0] - state.slot_x) <= SLOT_TOL_X and state.obj[1] <= SLOT_TOP
        s["lift"] = bool(s["lift"] or lift)
        s["insert"] = bool(s["insert"] or (s["lift"] and inside))


# ---------------------------------------------------------------- rendering


def _pixel_grid(size):
    xs = VIEW_X[0] + (np.arange(size) + 0.5) * (VIEW_X[1] - VIEW_X[0]) / size
    ys = VIEW_Y[1] - (np.arange(size) + 0.5) * (VIEW_Y[1] - VIEW_Y[0]) / size
    return np.meshgrid(xs, ys)


_GRID = _pixel_grid(IMAGE_SIZE)


def _segment_distance(px, py, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros_like(px) if denom == 0 else np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / denom, 0, 1)
    return np.hypot(px - (a[0] + t * ab[0]), py - (a[1] + t * ab[1]))


def render(state: ToyWorld, size: int = IMAGE_SIZE) -> np.ndarray:
    """(size, size) grayscale raster with intensities in [0, 1]."""
    px, py = _GRID if size == IMAGE_SIZE else _pixel_grid(size)
    img = np.zeros((size, size))
    img = np.maximum(img, 0.15 * (np.abs(py) < 0.012))
    if state.task.name == "toy_slot":
        for side in (-1, 1):
            post = (np.abs(px - (state.slot_x + side * (SLOT_TOL_X + 0.02))) < 0.015) & (py > -0.05) & (py < SLOT_TOP)
            img = np.maximum(img, 0.35 * post)
    for arm in range(2):
        pts = forward_kinematics(BASES[arm], state.qpos[arm * J_PER_ARM:(arm + 1) * J_PER_ARM])
        for a, b in zip(pts[:-1], pts[1:]):
            img = np.maximum(img, 0.5 * (_segment_distance(px, py, a, b) < 0.02))
        g = state.qpos[arm * J_PER_ARM + 3]
        img = np.maximum(img, (0.65 + 0.25 * g) * (np.hypot(px - pts[-1][0], py - pts[-1][1]) < 0.035))
    if state.task.name == "toy_slot":
        off = np.array([ROD_HALF, 0.0])
        img = np.maximum(img, 1.0 * (_segment_distance(px, py, state.obj - off, state.obj + off) < 0.025))
    else:
        img = np.maximum(img, 1.0 * ((np.abs(px - state.obj[0]) < 0.035) & (np.abs(py - state.obj[1]) < 0.03)))
    return img


# ---------------------------------------------------------------- scripted demonstrator


def _waypoints(state: ToyWorld):
    """Per-arm lists of (t, x, y, gripper) derived from the initial layout."""
    ox = state.layout["object_x"]
    if state.task.name == "toy_transfer":
        meet = (0.0, 0.40)
        arm1 = [(0, *HOME[0], 0), (20, ox, 0.15, 0), (30, ox, TABLE_Y, 0), (36, ox, TABLE_Y, 1),
                (58, *meet, 1), (70, *meet, 1), (74, *meet, 0), (92, -0.35, 0.35, 0), (100, -0.35, 0.35, 0)]
        arm2 = [(0, *HOME[1], 0), (40, *HOME[1], 0), (58, 0.12, 0.40, 0), (64, *meet, 0), (68, *meet, 1),
                (76, *meet, 1), (92, 0.35, 0.40, 1), (100, 0.35, 0.40, 1)]
        return arm1, arm2
    sx = state.layout["slot_x"]
    lift_y = 0.35
    plans = []
    for side in (-1, 1):
        gx = ox + side * ROD_HALF
        tx = sx + side * ROD_HALF
        home = HOME[0] if side < 0 else HOME[1]
        plans.append([(0, *home, 0), (20, gx, 0.15, 0), (30, gx, TABLE_Y, 0), (36, gx, TABLE_Y, 1),
                      (55, gx, lift_y, 1), (72, tx, lift_y, 1), (88, tx, TABLE_Y + 0.02, 1),
                      (92, tx, TABLE_Y + 0.02, 0), (100, tx, TABLE_Y + 0.02, 0)])
    return plans[0], plans[1]


def _interp(plan, t):
    times = [w[0] for w in plan]
    vals = np.array([w[1:] for w in plan], dtype=np.float64)
    return np.array([np.interp(t, times, vals[:, i]) for i in range(3)])


def scripted_policy(task, state: ToyWorld, rng: np.random.Generator | None = None,
                    noise: float = 0.0) -> np.ndarray:
    """Waypoint controller: IK toward the next tick's planned tip pose, plus joint noise."""
    get_task(task)
    plans = _waypoints(state)
    action = np.zeros(2 * J_PER_ARM)
    for arm in range(2):
        x, y, g = _interp(plans[arm], state.t + 1)
        q = inverse_kinematics(arm, (x, y))
        if noise > 0:
            if rng is None:
                raise UsageError("noisy scripted policy needs a random generator")
            q = q + rng.normal(0.0, noise, size=3)
        action[arm * J_PER_ARM:arm * J_PER_ARM + 3] = np.clip(q, JOINT_LIMITS[:, 0], JOINT_LIMITS[:, 1])
        action[arm * J_PER_ARM + 3] = g
    return action


class ScriptedAgent:
    """Adapter giving the scripted controller the evaluate() policy interface."""

    def __init__(self, task, noise: float = 0.0, seed: int = 0):
        self.task = get_task(task)
        self.noise = noise
        self.seed = seed
        self.rng = None

    def reset(self, seed: int | None = None):
        self.rng = Streams(self.seed if seed is None else seed).generator("scripted-noise")

    def act(self, obs: dict) -> np.ndarray:
        return scripted_policy(self.task, obs["state"], self.rng, self.noise)


class RandomAgent:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = None

    def reset(self, seed: int | None = None):
        self.rng = Streams(self.seed if seed is None else seed).generator("random-agent")

    def act(self, obs: dict) -> np.ndarray:
        a = np.empty(2 * J_PER_ARM)
        for arm in range(2):
            a[arm * J_PER_ARM:arm * J_PER_ARM + 3] = self.rng.uniform(JOINT_LIMITS[:, 0], JOINT_LIMITS[:, 1])
            a[arm * J_PER_ARM + 3] = self.rng.uniform(0.0, 1.0)
        return a


# ---------------------------------------------------------------- rollouts and evaluation


@dataclass
class StageOutcome:
    seed: int
    stages: dict
    length: int

    def to_dict(self):
        return {"seed": self.seed, "length": self.length, "stages": dict(self.stages)}


def rollout(policy, task, seed: int, length: int | None = None, record: bool = False):
    """Run one episode; returns (StageOutcome, list of states if ``record``)."""
    spec = get_task(task)
    state = reset(spec, seed)
    policy.reset(seed)
    states = [state] if record else None
    for _ in range(length or spec.length):
        obs = {"qpos": state.qpos.copy(), "image": render(state)[..., None], "state": state}
        state = step(state, policy.act(obs))
        if record:
            states.append(state)
    return StageOutcome(int(seed), dict(state.stages), state.t), states


@dataclass
class EvalReport:
    task: str
    episodes: int
    seeds: list
    rates: dict
    outcomes: list

    def to_dict(self, seed=None):
        return {"task": self.task, "episodes": self.episodes, "seed": seed,
                "stages": self.rates, "per_episode": [o.to_dict() for o in self.outcomes]}


def evaluate(policy, task, n_episodes: int, seeds=None) -> EvalReport:
    """Per-stage success percentages over ``n_episodes`` seeded rollouts."""
    spec = get_task(task)
    seeds = list(range(n_episodes)) if seeds is None else list(seeds)[:n_episodes]
    if len(seeds) < n_episodes:
        raise UsageError(f"need {n_episodes} seeds, got {len(seeds)}")
    outcomes = [rollout(policy, spec, s)[0] for s in seeds]
    rates = {name: 100.0 * sum(o.stages[name] for o in outcomes) / n_episodes for name in spec.stages}
    return EvalReport(spec.name, n_episodes, seeds, rates, outcomes)


def generate_demo(task, seed: int, noise: float = 0.0) -> DemoEpisode:
    """One scripted demonstration: per-tick qpos, commanded action, rendered image."""
    spec = get_task(task)
    state = reset(spec, seed)
    rng = Streams(seed).generator("demo-noise")
    qpos, actions, images = [], [], []
    for _ in range(spec.length):
        a = scripted_policy(spec, state, rng, noise)
        qpos.append(state.qpos.copy())
        actions.append(a)
        images.append(render(state))
        state = step(state, a)
    meta = {"task": spec.name, "seed": int(seed), "success": dict(state.stages)}
    return DemoEpisode(np.array(qpos), np.array(actions), np.array(images)[..., None], meta)
