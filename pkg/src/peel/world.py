"""Synthetic 2-D tabletop manipulation tasks.

A point effector moves in the unit workspace under acceleration control
(semi-implicit Euler, velocity and position clipped), closes its grip to
attach the nearest object within reach, and drags attached objects with it.
Tasks come in four families: goal (goal zone varies), spatial (layout of a
fixed target type varies), object (instructed target type varies among
distractors), and long (two pick-place stages that must latch in order).

Observations are two 12x12 intensity grids (global frame and an ego window
centered on the effector) plus a 6-float proprioceptive vector. A scripted
PD controller provides demonstrations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import ContractViolation
from .rng import stream

NUM_TYPES = 5

# token vocabulary (instruction ids)
PAD, MOVE, TO, THEN = 0, 1, 2, 3
TYPE_BASE = 4            # 5 object types
GX_BASE = TYPE_BASE + NUM_TYPES   # 12 x-cell tokens
GY_BASE = GX_BASE + 12            # 12 y-cell tokens

GOAL_LATTICE = [round(0.3 + 0.05 * i, 3) for i in range(9)]


@dataclass
class TaskSpec:
    """Everything needed to instantiate episodes of one task."""

    task_id: str
    family: str
    objects: list          # [(x, y, type_id), ...]
    goals: list            # [(x, y), ...] one per stage
    stages: list           # object index per stage, in required order
    instruction: list      # token ids
    horizon: int = 120
    epsilon: float = 0.06

    def token_arrays(self, vocab, max_tokens):
        n = len(self.instruction)
        if n == 0 or n > max_tokens:
            raise ContractViolation(
                f"instruction length {n} outside [1, {max_tokens}] for {self.task_id}")
        ids = np.zeros(max_tokens, dtype=np.int64)
        ids[:n] = self.instruction
        if ids.max() >= vocab:
            raise ContractViolation(
                f"token id {int(ids.max())} >= vocab {vocab} in {self.task_id}")
        w = np.zeros(max_tokens, dtype=np.float32)
        w[:n] = 1.0 / n
        return ids, w

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "family": self.family,
            "objects": [[float(x), float(y), int(t)] for x, y, t in self.objects],
            "goals": [[float(x), float(y)] for x, y in self.goals],
            "stages": [int(s) for s in self.stages],
            "instruction": [int(t) for t in self.instruction],
            "horizon": int(self.horizon),
            "epsilon": float(self.epsilon),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(task_id=d["task_id"], family=d["family"],
                   objects=[tuple(o) for o in d["objects"]],
                   goals=[tuple(g) for g in d["goals"]],
                   stages=list(d["stages"]), instruction=list(d["instruction"]),
                   horizon=int(d["horizon"]), epsilon=float(d["epsilon"]))


def save_suite(path, tasks):
    with open(path, "w") as f:
        json.dump([t.to_dict() for t in tasks], f, indent=1)


def load_suite(path):
    with open(path) as f:
        data = json.load(f)
    return [TaskSpec.from_dict(d) for d in data]


class WorldState:
    """Mutable episode state; step() returns an updated copy."""

    __slots__ = ("pos", "vel", "grip", "attached", "objects", "stage")

    def __init__(self, pos, vel, grip, attached, objects, stage):
        self.pos = pos
        self.vel = vel
        self.grip = grip
        self.attached = attached
        self.objects = objects
        self.stage = stage

    def copy(self):
        return WorldState(self.pos.copy(), self.vel.copy(), self.grip,
                          self.attached, self.objects.copy(), self.stage)


class World:
    """Physics constants and observation rendering shared by all tasks."""

    def __init__(self, grid=12, dt=0.1, v_max=0.1, pick_radius=0.05, ego_span=0.25):
        self.grid = grid
        self.dt = dt
        self.v_max = v_max
        self.pick_radius = pick_radius
        self.ego_span = ego_span

    # ------------------------------------------------------------ dynamics

    def reset(self, task, rng):
        """Sample an initial state: jittered objects, random effector start."""
        objects = np.array([[x, y] for x, y, _ in task.objects], dtype=np.float64)
        objects += rng.uniform(-0.02, 0.02, size=objects.shape)
        objects = np.clip(objects, 0.0, 1.0)
        pos = rng.uniform(0.35, 0.65, size=2)
        return WorldState(pos=pos, vel=np.zeros(2), grip=False, attached=None,
                          objects=objects, stage=0)

    def step(self, task, state, action):
        """Advance one tick; clips acceleration, velocity and position."""
        action = np.asarray(action, dtype=np.float64)
        if not np.all(np.isfinite(action)):
            raise ContractViolation(f"non-finite action {action}")
        a = np.clip(action[:2], -1.0, 1.0)
        s = state.copy()
        s.vel = np.clip(s.vel + a * self.dt, -self.v_max, self.v_max)
        s.pos = np.clip(s.pos + s.vel * self.dt, 0.0, 1.0)
        grip = float(action[2]) > 0.0
        s.grip = grip
        if s.attached is not None:
            if grip:
                s.objects[s.attached] = s.pos
            else:
                s.attached = None
        elif grip:
            d = np.linalg.norm(s.objects - s.pos, axis=1)
            j = int(np.argmin(d))  # ties resolve to the lower index
            if d[j] <= self.pick_radius:
                s.attached = j
                s.objects[j] = s.pos
        if task.family == "long" and s.stage < len(task.stages):
            obj = s.objects[task.stages[s.stage]]
            goal = np.asarray(task.goals[s.stage])
            if np.linalg.norm(obj - goal) <= task.epsilon:
                s.stage += 1
        return s

    def success(self, task, state):
        """Task predicate; long-family stages latch in order inside step()."""
        if task.family == "long":
            return state.stage >= len(task.stages)
        obj = state.objects[task.stages[0]]
        goal = np.asarray(task.goals[0])
        return bool(np.linalg.norm(obj - goal) <= task.epsilon)

    # --------------------------------------------------------- observation

    def _mark(self, grid_arr, cell_x, cell_y, value):
        g = self.grid
        if 0 <= cell_x < g and 0 <= cell_y < g:
            grid_arr[cell_y, cell_x] = max(grid_arr[cell_y, cell_x], value)

    def observe(self, task, state):
        """(flattened global+ego grids, proprio) as float32 arrays."""
        g = self.grid
        glob = np.zeros((g, g), dtype=np.float32)
        ego = np.zeros((g, g), dtype=np.float32)
        half = self.ego_span / 2.0

        def cells(p, origin, span):
            return (int((p[0] - origin[0]) / span * g), int((p[1] - origin[1]) / span * g))

        for goal in task.goals:
            gx, gy = cells(goal, (0.0, 0.0), 1.0)
            self._mark(glob, gx, gy, 0.5)
            ex, ey = cells(goal, (state.pos[0] - half, state.pos[1] - half), self.ego_span)
            self._mark(ego, ex, ey, 0.5)
        for idx, (_, _, t) in enumerate(task.objects):
            p = state.objects[idx]
            value = (t + 1) / NUM_TYPES
            gx, gy = cells(p, (0.0, 0.0), 1.0)
            self._mark(glob, gx, gy, value)
            ex, ey = cells(p, (state.pos[0] - half, state.pos[1] - half), self.ego_span)
            self._mark(ego, ex, ey, value)
        prop = np.array([state.pos[0], state.pos[1],
                         state.vel[0] / self.v_max, state.vel[1] / self.v_max,
                         1.0 if state.grip else 0.0,
                         1.0 if state.attached is not None else 0.0], dtype=np.float32)
        vis = np.concatenate([glob.ravel(), ego.ravel()])
        return vis, prop


def scripted_action(world, task, state, kp=4.0, kd=2.0):
    """PD waypoint controller used to collect demonstrations.

    Approach the active stage's object with open grip, close the grip inside
    a zone slightly wider than the pick radius (so grab intent spans several
    observable steps), carry to the goal, release at half the goal tolerance.
    """
    stage = state.stage if task.family == "long" else 0
    if stage >= len(task.stages):
        return np.array([0.0, 0.0, -1.0])
    target = task.stages[stage]
    goal = np.asarray(task.goals[stage], dtype=np.float64)
    if state.attached == target:
        waypoint = goal
        grip = -1.0 if np.linalg.norm(state.pos - goal) <= 0.5 * task.epsilon else 1.0
    elif state.attached is not None:
        waypoint = state.pos
        grip = -1.0
    else:
        waypoint = state.objects[target]
        grip = 1.0 if np.linalg.norm(state.pos - waypoint) <= 1.6 * world.pick_radius else -1.0
    acc = np.clip(kp * (waypoint - state.pos) - kd * state.vel, -1.0, 1.0)
    return np.array([acc[0], acc[1], grip])


# -------------------------------------------------------------- generation


def _instruction(target_type, goal):
    gx = GOAL_LATTICE.index(round(goal[0], 3))
    gy = GOAL_LATTICE.index(round(goal[1], 3))
    return [MOVE, TYPE_BASE + target_type, TO, GX_BASE + gx, GY_BASE + gy]


def _lattice_points(parity):
    pts = []
    for i, x in enumerate(GOAL_LATTICE):
        for j, y in enumerate(GOAL_LATTICE):
            if (i + j) % 2 == parity:
                pts.append((x, y))
    return pts


def _place_objects(rng, n, goals, min_sep=0.18, goal_sep=0.15, tries=1000):
    for _ in range(tries):
        pts = rng.uniform(0.3, 0.7, size=(n, 2))
        ok = True
        for i in range(n):
            for j in range(i + 1, n):
                if np.linalg.norm(pts[i] - pts[j]) < min_sep:
                    ok = False
            for g in goals:
                if np.linalg.norm(pts[i] - np.asarray(g)) < goal_sep:
                    ok = False
        if ok:
            return [(float(x), float(y)) for x, y in pts]
    raise ContractViolation(f"could not place {n} objects after {tries} tries")


def generate_suite(seed, family, num_tasks, parity=1):
    """Deterministically generate `num_tasks` tasks of one family.

    Goal centers come from a lattice restricted to one parity class, so a
    pretraining suite (parity 0) never shares a goal zone with a lifelong
    suite (parity 1). Instructions are pairwise distinct within a suite.
    """
    if family not in ("goal", "spatial", "object", "long"):
        raise ContractViolation(f"unknown task family {family!r}")
    if num_tasks < 1:
        raise ContractViolation(f"num_tasks must be >= 1, got {num_tasks}")
    rng = stream(seed, "suite", family, parity)
    lattice = _lattice_points(parity)
    tasks = []
    seen_instructions = set()
    goal_perm = rng.permutation(len(lattice))
    for i in range(num_tasks):
        tid = f"{family}-{seed}-{i}"
        if family == "goal":
            goal = lattice[goal_perm[i % len(lattice)]]
            ttype = int(rng.integers(NUM_TYPES))
            pos = _place_objects(rng, 1, [goal])
            objects = [(pos[0][0], pos[0][1], ttype)]
            stages, goals = [0], [goal]
            instr = _instruction(ttype, goal)
        elif family == "spatial":
            goal = lattice[goal_perm[i % len(lattice)]]
            types = [0] + list(rng.choice(np.arange(1, NUM_TYPES), size=2, replace=False))
            pos = _place_objects(rng, 3, [goal])
            objects = [(p[0], p[1], int(t)) for p, t in zip(pos, types)]
            stages, goals = [0], [goal]
            instr = _instruction(0, goal)
        elif family == "object":
            goal = lattice[goal_perm[0]] if num_tasks <= NUM_TYPES else \
                lattice[goal_perm[i % len(lattice)]]
            ttype = i % NUM_TYPES
            others = [t for t in range(NUM_TYPES) if t != ttype]
            types = [ttype] + list(rng.choice(others, size=2, replace=False))
            pos = _place_objects(rng, 3, [goal])
            objects = [(p[0], p[1], int(t)) for p, t in zip(pos, types)]
            stages, goals = [0], [goal]
            instr = _instruction(ttype, goal)
        else:  # long
            g1 = lattice[goal_perm[(2 * i) % len(lattice)]]
            g2 = lattice[goal_perm[(2 * i + 1) % len(lattice)]]
            t1, t2 = rng.choice(NUM_TYPES, size=2, replace=False)
            pos = _place_objects(rng, 2, [g1, g2])
            objects = [(pos[0][0], pos[0][1], int(t1)), (pos[1][0], pos[1][1], int(t2))]
            stages, goals = [0, 1], [g1, g2]
            instr = _instruction(int(t1), g1) + [THEN] + _instruction(int(t2), g2)
        key = tuple(instr)
        if key in seen_instructions:
            raise ContractViolation(f"duplicate instruction generated for {tid}")
        seen_instructions.add(key)
        horizon = 200 if family == "long" else 120
        tasks.append(TaskSpec(task_id=tid, family=family, objects=objects, goals=goals,
                              stages=stages, instruction=instr, horizon=horizon))
    return tasks


def pretrain_suite(seed, num_tasks=30):
    """A mixed-family suite on the complementary goal lattice (parity 0)."""
    families = ["goal", "spatial", "object", "long"]
    per = {f: 0 for f in families}
    for i in range(num_tasks):
        per[families[i % len(families)]] += 1
    tasks = []
    for f in families:
        if per[f]:
            batch = generate_suite(seed, f, per[f], parity=0)
            for t in batch:
                t.task_id = f"pre-{t.task_id}"
            tasks.extend(batch)
    return tasks


# ------------------------------------------------------------------- demos


class Trajectory:
    """One episode: observations (S+1, D), actions (S, 3), success, reset seed."""

    __slots__ = ("observations", "actions", "success", "seed")

    def __init__(self, observations, actions, success, seed):
        self.observations = np.asarray(observations, dtype=np.float32)
        self.actions = np.asarray(actions, dtype=np.float32)
        self.success = bool(success)
        self.seed = int(seed)

    @property
    def steps(self):
        return self.actions.shape[0]


def run_scripted_episode(world, task, episode_seed, action_noise=0.0):
    """Roll the PD expert once; returns a Trajectory (success or not).

    With action_noise > 0, uniform noise perturbs the executed acceleration
    each step and the perturbed action is what gets stored, so trajectories
    still replay exactly while the expert's corrections of its own noise
    populate the dataset with recovery behavior around nominal paths.
    """
    rng = stream(episode_seed, "episode")
    state = world.reset(task, rng)
    observations = []
    actions = []
    success = False
    for _ in range(task.horizon):
        vis, prop = world.observe(task, state)
        observations.append(np.concatenate([vis, prop]))
        action = scripted_action(world, task, state)
        if action_noise > 0.0:
            action = action.copy()
            action[:2] = np.clip(
                action[:2] + rng.uniform(-action_noise, action_noise, size=2),
                -1.0, 1.0)
        actions.append(action)
        state = world.step(task, state, action)
        if world.success(task, state):
            success = True
            break
    vis, prop = world.observe(task, state)
    observations.append(np.concatenate([vis, prop]))
    return Trajectory(observations, actions, success, episode_seed)


def collect_demonstrations(world, task, count, seed, action_noise=0.25):
    """`count` successful expert episodes; failures are resampled.

    Raises if the expert cannot produce enough successes within 10x count
    attempts, which signals a broken task rather than bad luck.
    """
    demos = []
    attempt = 0
    gen = stream(seed, "demo", task.task_id)
    while len(demos) < count:
        if attempt >= 10 * count:
            raise ContractViolation(
                f"scripted expert produced {len(demos)}/{count} successes "
                f"after {attempt} attempts on {task.task_id}")
        episode_seed = int(gen.integers(0, 2**63 - 1))
        traj = run_scripted_episode(world, task, episode_seed, action_noise)
        attempt += 1
        if traj.success:
            demos.append(traj)
    return demos


def replay_demo(world, task, trajectory):
    """Re-run a stored demo's actions from its reset seed; True if it succeeds."""
    state = world.reset(task, stream(trajectory.seed, "episode"))
    for action in trajectory.actions:
        state = world.step(task, state, action)
        if world.success(task, state):
            return True
    return world.success(task, state)
