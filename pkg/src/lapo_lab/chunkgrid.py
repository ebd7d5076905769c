"""Grid-world manipulation simulator driven by action chunks.

Features:
- Three suites of graded horizon: ``reach`` (touch one goal cell),
  ``pickplace`` (carry one object to its goal) and ``sequence`` (two objects,
  placed in order).
- Each chunk is H micro-steps; an episode ends on success (the remaining
  micro-steps of the chunk are dropped) or when the step counter hits T_max.
- Sparse terminal reward of 5 on success, 0 otherwise. The success reward is a
  parameter so the reward signal can be ablated to zero.
- A greedy Manhattan-path expert produces demonstrations.
- Observations are a flat float vector that can be decoded back into a state,
  which is how stored demos are replayed at micro-step resolution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .action_codec import ActionChunk
from .errors import EnvError

logger = logging.getLogger(__name__)

SUITES = ("reach", "pickplace", "sequence")
SUITE_IDS = {name: i for i, name in enumerate(SUITES)}
T_MAX = {"reach": 48, "pickplace": 96, "sequence": 192}
N_SUBGOALS = {"reach": 1, "pickplace": 1, "sequence": 2}
N_OBJECTS = {"reach": 0, "pickplace": 1, "sequence": 2}
MAX_OBJECTS = 2
MAX_GOALS = 2
DEFAULT_GRID = 8
DEFAULT_VARIANTS = 10
MIN_ACTION_DIM = 3
MOVE_THRESHOLD = 0.5
SUCCESS_REWARD = 5.0
LAYOUT_SALT = 7919

# observation layout
_AGENT = slice(0, 2)
_GRIPPER = 2
_OBJ_BASE = 3
_OBJ_WIDTH = 5
_GOAL_BASE = _OBJ_BASE + MAX_OBJECTS * _OBJ_WIDTH
_GOAL_WIDTH = 3
_PROGRESS = _GOAL_BASE + MAX_GOALS * _GOAL_WIDTH
_STEPS = _PROGRESS + 1
_SUITE = slice(_STEPS + 1, _STEPS + 1 + len(SUITES))
OBS_DIM = _SUITE.stop

Cell = Tuple[int, int]


@dataclass(frozen=True)
class TaskSpec:
    suite: str
    variant: int
    n_variants: int = DEFAULT_VARIANTS
    grid_size: int = DEFAULT_GRID

    def __post_init__(self):
        if self.suite not in SUITE_IDS:
            raise EnvError(f"Unknown suite: {self.suite}")
        if not 0 <= self.variant < self.n_variants:
            raise EnvError(f"Unknown variant {self.variant} for suite {self.suite}")
        if self.grid_size < 3:
            raise EnvError(f"grid_size must be >= 3, got {self.grid_size}")
        needed = N_SUBGOALS[self.suite] * self.n_variants
        if needed > self.grid_size**2:
            raise EnvError(f"{self.n_variants} variants do not fit a {self.grid_size}x{self.grid_size} grid")

    @property
    def suite_id(self) -> int:
        return SUITE_IDS[self.suite]

    @property
    def t_max(self) -> int:
        return T_MAX[self.suite]

    @property
    def task_id(self) -> int:
        return self.suite_id * self.n_variants + self.variant


@dataclass(frozen=True)
class EnvState:
    suite: str
    grid_size: int
    agent: Cell
    gripper: bool
    objects: Tuple[Cell, ...]
    held: Tuple[bool, ...]
    placed: Tuple[bool, ...]
    goals: Tuple[Cell, ...]
    progress: int
    steps: int

    @property
    def t_max(self) -> int:
        return T_MAX[self.suite]

    @property
    def success(self) -> bool:
        return self.progress >= N_SUBGOALS[self.suite]

    @property
    def done(self) -> bool:
        return self.success or self.steps >= self.t_max

    @property
    def held_index(self) -> Optional[int]:
        for i, h in enumerate(self.held):
            if h:
                return i
        return None


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    success: bool
    micro_steps: int


@dataclass
class DemoTrajectory:
    suite: str
    variant: int
    observations: np.ndarray  # (T, OBS_DIM)
    actions: np.ndarray  # (T, H, A)
    valid_micro: Optional[np.ndarray] = None  # (T,) micro-steps actually executed
    seed: Optional[int] = None

    @property
    def n_steps(self) -> int:
        return int(self.observations.shape[0])


# ----------------------------- layout -----------------------------


def _cells(grid_size: int) -> List[Cell]:
    return [(x, y) for y in range(grid_size) for x in range(grid_size)]


def task_layout(task: TaskSpec) -> Tuple[Tuple[Cell, ...], Tuple[Cell, ...]]:
    """Goal and object cells for a task variant.

    Goals come from one permutation per suite, so variants never share a goal.
    """
    cells = _cells(task.grid_size)
    suite_rng = np.random.default_rng([LAYOUT_SALT, task.suite_id])
    order = suite_rng.permutation(len(cells))
    n_goals = N_SUBGOALS[task.suite]
    goals = tuple(cells[i] for i in order[task.variant * n_goals : (task.variant + 1) * n_goals])
    n_obj = N_OBJECTS[task.suite]
    if not n_obj:
        return goals, ()
    variant_rng = np.random.default_rng([LAYOUT_SALT, task.suite_id, task.variant])
    free = [c for c in cells if c not in goals]
    picks = variant_rng.choice(len(free), size=n_obj, replace=False)
    return goals, tuple(free[i] for i in picks)


def initial_state(task: TaskSpec, seed: int) -> EnvState:
    goals, objects = task_layout(task)
    occupied = set(goals) | set(objects)
    rng = np.random.default_rng([LAYOUT_SALT, task.suite_id, task.variant, int(seed)])
    free = [c for c in _cells(task.grid_size) if c not in occupied and _manhattan(c, goals[0]) >= 2]
    agent = free[int(rng.integers(len(free)))]
    n = len(objects)
    return EnvState(
        suite=task.suite,
        grid_size=task.grid_size,
        agent=agent,
        gripper=False,
        objects=objects,
        held=(False,) * n,
        placed=(False,) * n,
        goals=goals,
        progress=0,
        steps=0,
    )


def _manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


# ----------------------------- dynamics -----------------------------


def _quantize(v: float) -> int:
    if v > MOVE_THRESHOLD:
        return 1
    if v < -MOVE_THRESHOLD:
        return -1
    return 0


def apply_micro(state: EnvState, action: Sequence[float]) -> EnvState:
    """One micro-step: move, then grab/release, then update progress."""
    if state.done:
        raise EnvError("step after episode end")
    g = state.grid_size
    x = min(max(state.agent[0] + _quantize(action[0]), 0), g - 1)
    y = min(max(state.agent[1] + _quantize(action[1]), 0), g - 1)
    agent = (x, y)
    objects = list(state.objects)
    held = list(state.held)
    placed = list(state.placed)
    carrying = state.held_index
    if carrying is not None:
        objects[carrying] = agent

    grip = float(action[2]) > 0.0
    if grip and carrying is None:
        for i, cell in enumerate(objects):
            if cell == agent and not placed[i]:
                held[i] = True
                break
    elif not grip and carrying is not None:
        held[carrying] = False

    progress = state.progress
    if state.suite == "reach":
        if agent == state.goals[0]:
            progress = 1
    else:
        while progress < len(state.goals):
            i = progress
            if held[i] or objects[i] != state.goals[i]:
                break
            placed[i] = True
            progress += 1

    return replace(
        state,
        agent=agent,
        gripper=grip,
        objects=tuple(objects),
        held=tuple(held),
        placed=tuple(placed),
        progress=progress,
        steps=state.steps + 1,
    )


def step_state(
    state: EnvState, chunk: ActionChunk, success_reward: float = SUCCESS_REWARD
) -> Tuple[EnvState, StepResult]:
    if state.done:
        raise EnvError("step after episode end")
    if chunk.action_dim < MIN_ACTION_DIM:
        raise EnvError(f"actions need at least {MIN_ACTION_DIM} components, got {chunk.action_dim}")
    used = 0
    for action in chunk.steps:
        state = apply_micro(state, action)
        used += 1
        if state.done:
            break
    reward = success_reward if state.success else 0.0
    return state, StepResult(
        observation=encode_observation(state),
        reward=reward,
        done=state.done,
        success=state.success,
        micro_steps=used,
    )


class ChunkGridEnv:
    """Stateful wrapper around the pure transition functions."""

    def __init__(self, task: TaskSpec, success_reward: float = SUCCESS_REWARD):
        self.task = task
        self.success_reward = success_reward
        self.state: Optional[EnvState] = None

    def reset(self, seed: int) -> np.ndarray:
        self.state = initial_state(self.task, seed)
        return encode_observation(self.state)

    def step_chunk(self, chunk: ActionChunk) -> StepResult:
        if self.state is None:
            raise EnvError("step before reset")
        self.state, result = step_state(self.state, chunk, self.success_reward)
        return result


# ----------------------------- observation codec -----------------------------


def _coord(v: int, grid_size: int) -> float:
    return 2.0 * v / (grid_size - 1) - 1.0


def _uncoord(v: float, grid_size: int) -> int:
    return int(round((float(v) + 1.0) * (grid_size - 1) / 2.0))


def encode_observation(state: EnvState) -> np.ndarray:
    g = state.grid_size
    obs = np.zeros(OBS_DIM, dtype=np.float64)
    obs[_AGENT] = [_coord(state.agent[0], g), _coord(state.agent[1], g)]
    obs[_GRIPPER] = 1.0 if state.gripper else 0.0
    for i, cell in enumerate(state.objects):
        base = _OBJ_BASE + i * _OBJ_WIDTH
        obs[base : base + _OBJ_WIDTH] = [
            1.0,
            _coord(cell[0], g),
            _coord(cell[1], g),
            float(state.held[i]),
            float(state.placed[i]),
        ]
    for j, cell in enumerate(state.goals):
        base = _GOAL_BASE + j * _GOAL_WIDTH
        obs[base : base + _GOAL_WIDTH] = [1.0, _coord(cell[0], g), _coord(cell[1], g)]
    obs[_PROGRESS] = state.progress / N_SUBGOALS[state.suite]
    obs[_STEPS] = state.steps / state.t_max
    obs[_SUITE.start + SUITE_IDS[state.suite]] = 1.0
    return obs.astype(np.float32)


def decode_observation(obs: np.ndarray, grid_size: int = DEFAULT_GRID) -> EnvState:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (OBS_DIM,):
        raise EnvError(f"observation must have shape ({OBS_DIM},), got {obs.shape}")
    suite = SUITES[int(np.argmax(obs[_SUITE]))]
    objects, held, placed, goals = [], [], [], []
    for i in range(MAX_OBJECTS):
        base = _OBJ_BASE + i * _OBJ_WIDTH
        if obs[base] > 0.5:
            objects.append((_uncoord(obs[base + 1], grid_size), _uncoord(obs[base + 2], grid_size)))
            held.append(obs[base + 3] > 0.5)
            placed.append(obs[base + 4] > 0.5)
    for j in range(MAX_GOALS):
        base = _GOAL_BASE + j * _GOAL_WIDTH
        if obs[base] > 0.5:
            goals.append((_uncoord(obs[base + 1], grid_size), _uncoord(obs[base + 2], grid_size)))
    return EnvState(
        suite=suite,
        grid_size=grid_size,
        agent=(_uncoord(obs[0], grid_size), _uncoord(obs[1], grid_size)),
        gripper=obs[_GRIPPER] > 0.5,
        objects=tuple(objects),
        held=tuple(held),
        placed=tuple(placed),
        goals=tuple(goals),
        progress=int(round(obs[_PROGRESS] * N_SUBGOALS[suite])),
        steps=int(round(obs[_STEPS] * T_MAX[suite])),
    )


def render(state: EnvState) -> str:
    """ASCII frame: A agent (a when holding), o/O objects (O placed), G goals."""
    g = state.grid_size
    rows = [["." for _ in range(g)] for _ in range(g)]
    for x, y in state.goals:
        rows[y][x] = "G"
    for i, (x, y) in enumerate(state.objects):
        rows[y][x] = "O" if state.placed[i] else "o"
    ax, ay = state.agent
    rows[ay][ax] = "a" if state.held_index is not None else "A"
    header = f"{state.suite} step {state.steps}/{state.t_max} progress {state.progress}"
    return "\n".join([header] + ["".join(r) for r in reversed(rows)])


# ----------------------------- expert -----------------------------


def _toward(src: Cell, dst: Cell) -> Tuple[int, int]:
    if src[0] != dst[0]:
        return (1 if dst[0] > src[0] else -1), 0
    if src[1] != dst[1]:
        return 0, (1 if dst[1] > src[1] else -1)
    return 0, 0


def plan_micro_actions(state: EnvState, action_dim: int = MIN_ACTION_DIM) -> List[np.ndarray]:
    """Greedy micro-step plan from ``state`` to success (x first, then y)."""
    actions: List[np.ndarray] = []
    s = state
    while not s.success:
        if s.done or len(actions) > s.t_max:
            raise EnvError(f"expert failed to solve {s.suite} layout within {s.t_max} steps")
        carrying = s.held_index
        if s.suite == "reach":
            target, grip_on_arrival, grip_en_route = s.goals[0], -1.0, -1.0
        elif carrying is not None:
            target, grip_on_arrival, grip_en_route = s.goals[s.progress], -1.0, 1.0
        else:
            target, grip_on_arrival, grip_en_route = s.objects[s.progress], 1.0, -1.0
        dx, dy = _toward(s.agent, target)
        arriving = (s.agent[0] + dx, s.agent[1] + dy) == target
        action = np.zeros(action_dim, dtype=np.float32)
        action[0], action[1] = dx, dy
        action[2] = grip_on_arrival if arriving else grip_en_route
        s = apply_micro(s, action)
        actions.append(action)
    return actions


def chunk_actions(micro: List[np.ndarray], horizon: int) -> List[np.ndarray]:
    """Group micro-actions into (H, A) chunks, padding with the final action."""
    chunks = []
    for start in range(0, len(micro), horizon):
        block = list(micro[start : start + horizon])
        block += [block[-1]] * (horizon - len(block))
        chunks.append(np.stack(block).astype(np.float32))
    return chunks


def scripted_expert(task: TaskSpec, seed: int, horizon: int = 8, action_dim: int = MIN_ACTION_DIM) -> DemoTrajectory:
    env = ChunkGridEnv(task)
    obs = env.reset(seed)
    micro = plan_micro_actions(env.state, action_dim)
    observations, chunks, valid = [], [], []
    result = None
    for chunk in chunk_actions(micro, horizon):
        observations.append(obs)
        chunks.append(chunk)
        result = env.step_chunk(ActionChunk(chunk))
        valid.append(result.micro_steps)
        obs = result.observation
    if result is None or not result.success:
        raise EnvError(f"expert replay did not succeed on {task.suite} variant {task.variant}")
    logger.debug("expert %s/%d seed %d: %d micro-steps", task.suite, task.variant, seed, len(micro))
    return DemoTrajectory(
        suite=task.suite,
        variant=task.variant,
        observations=np.stack(observations),
        actions=np.stack(chunks),
        valid_micro=np.asarray(valid, dtype=np.int64),
        seed=seed,
    )


def micro_states(traj: DemoTrajectory, grid_size: int = DEFAULT_GRID) -> Tuple[List[EnvState], np.ndarray]:
    """Replay a stored trajectory; returns every micro-step state and per-step counts.

    ``states[0]`` is the decoded first observation; the count array gives how
    many micro-steps of each chunk were executed before the episode ended.
    """
    if traj.n_steps == 0:
        return [], np.zeros(0, dtype=np.int64)
    state = decode_observation(traj.observations[0], grid_size)
    states = [state]
    counts = []
    for t in range(traj.n_steps):
        used = 0
        for action in traj.actions[t]:
            if state.done:
                break
            state = apply_micro(state, action)
            states.append(state)
            used += 1
        counts.append(used)
    return states, np.asarray(counts, dtype=np.int64)


def ensure_valid_micro(traj: DemoTrajectory, grid_size: int = DEFAULT_GRID) -> DemoTrajectory:
    if traj.valid_micro is None:
        _, counts = micro_states(traj, grid_size)
        traj.valid_micro = counts
    return traj
