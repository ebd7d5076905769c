"""Greedy evaluation harness.

The policy acts with temperature 0 and, in adaptive mode, exits latent
reasoning at the first candidate whose end probability reaches ``p_exit``.
The scripted expert runs through the same harness, replanning from the
decoded observation at every decision.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from .action_codec import ActionChunk
from .chunkgrid import ChunkGridEnv, TaskSpec, chunk_actions, decode_observation, plan_micro_actions, render
from .errors import EnvError
from .io.schemas import TrainConfig
from .policy import PolicyParams, act, eval_mode

logger = logging.getLogger(__name__)


class Agent(Protocol):
    def decide(self, obs: np.ndarray, task: TaskSpec) -> Tuple[ActionChunk, Optional[int]]:
        """Next action chunk and the number of latents used (None when not applicable)."""


class PolicyAgent:
    def __init__(self, tensors: Mapping, cfg: TrainConfig):
        # no exploration noise at evaluation time
        self.cfg = cfg.model_copy(update={"sigma_explore": 0.0})
        self.tensors = tensors
        self.mode = eval_mode(cfg)

    def decide(self, obs: np.ndarray, task: TaskSpec) -> Tuple[ActionChunk, Optional[int]]:
        decision = act(self.tensors, self.cfg, obs, task.task_id, self.mode, temperature=0.0)
        return decision.chunk, decision.n_latent


class ExpertAgent:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    def decide(self, obs: np.ndarray, task: TaskSpec) -> Tuple[ActionChunk, Optional[int]]:
        state = decode_observation(obs, task.grid_size)
        micro = plan_micro_actions(state, self.cfg.action_dim)
        if not micro:
            raise EnvError(f"expert has nothing to do on {task.suite} variant {task.variant}")
        return ActionChunk(chunk_actions(micro, self.cfg.horizon)[0]), None


@dataclass
class EpisodeResult:
    task: TaskSpec
    seed: int
    success: bool
    micro_steps: int
    lengths: List[int]
    frames: List[str] = field(default_factory=list)


def episode_seed(seed: int, task: TaskSpec, index: int) -> int:
    """Layout seed for one evaluation episode, independent of rollout order."""
    return int(np.random.SeedSequence([seed, 3, task.task_id, index]).generate_state(1)[0])


def run_episode(agent: Agent, task: TaskSpec, seed: int, cfg: TrainConfig, render_frames: bool = False) -> EpisodeResult:
    env = ChunkGridEnv(task)
    obs = env.reset(seed)
    frames = [render(env.state)] if render_frames else []
    lengths: List[int] = []
    micro = 0
    cap = -(-task.t_max // cfg.horizon) + 1
    result = None
    for _ in range(cap):
        chunk, n_latent = agent.decide(obs, task)
        if n_latent is not None:
            lengths.append(n_latent)
        result = env.step_chunk(chunk)
        micro += result.micro_steps
        obs = result.observation
        if render_frames:
            frames.append(render(env.state))
        if result.done:
            break
    return EpisodeResult(task, seed, bool(result and result.success), micro, lengths, frames)


@dataclass
class SuiteResult:
    suite: str
    episodes: int = 0
    successes: int = 0
    micro_steps: int = 0
    length_hist: List[int] = field(default_factory=list)
    per_variant: Dict[int, List[int]] = field(default_factory=dict)  # variant -> [successes, episodes]

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else float("nan")

    @property
    def mean_episode_steps(self) -> float:
        return self.micro_steps / self.episodes if self.episodes else float("nan")


@dataclass
class EvalReport:
    suites: Dict[str, SuiteResult]
    candidates: List[int]
    episodes: List[EpisodeResult] = field(default_factory=list)

    def _total(self, attr: str) -> int:
        return sum(getattr(s, attr) for s in self.suites.values())

    @property
    def success_rate(self) -> float:
        n = self._total("episodes")
        return self._total("successes") / n if n else float("nan")

    @property
    def mean_episode_steps(self) -> float:
        n = self._total("episodes")
        return self._total("micro_steps") / n if n else float("nan")

    @property
    def length_hist(self) -> List[int]:
        hist = [0] * len(self.candidates)
        for s in self.suites.values():
            for i, c in enumerate(s.length_hist):
                hist[i] += c
        return hist

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for name, s in self.suites.items():
            row = {
                "suite": name,
                "episodes": s.episodes,
                "success_rate": s.success_rate,
                "mean_episode_steps": s.mean_episode_steps,
            }
            row.update({f"len_{c}": n for c, n in zip(self.candidates, s.length_hist)})
            rows.append(row)
        return pd.DataFrame(rows)

    def variant_frame(self) -> pd.DataFrame:
        rows = [
            {"suite": name, "variant": v, "successes": ok, "episodes": n, "success_rate": ok / n}
            for name, s in self.suites.items()
            for v, (ok, n) in sorted(s.per_variant.items())
        ]
        return pd.DataFrame(rows)


def eval_policy(
    params,
    cfg: TrainConfig,
    tasks: Sequence[TaskSpec],
    n_rollouts: int,
    seed: int,
    agent: Optional[Agent] = None,
    workers: int = 1,
    render_frames: bool = False,
) -> EvalReport:
    """``n_rollouts`` greedy episodes per task; ``params`` may be None when an agent is given."""
    if agent is None:
        tensors = params.snapshot() if isinstance(params, PolicyParams) else params
        agent = PolicyAgent(tensors, cfg)
    jobs = [(task, episode_seed(seed, task, r)) for task in tasks for r in range(n_rollouts)]

    def run(job):
        task, s = job
        return run_episode(agent, task, s, cfg, render_frames)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            episodes = list(pool.map(run, jobs))
    else:
        episodes = [run(job) for job in jobs]

    candidates = cfg.candidates if cfg.adaptive else []
    suites: Dict[str, SuiteResult] = {}
    for ep in episodes:
        s = suites.setdefault(ep.task.suite, SuiteResult(ep.task.suite, length_hist=[0] * len(candidates)))
        s.episodes += 1
        s.successes += int(ep.success)
        s.micro_steps += ep.micro_steps
        counts = s.per_variant.setdefault(ep.task.variant, [0, 0])
        counts[0] += int(ep.success)
        counts[1] += 1
        for n in ep.lengths:
            if n in candidates:
                s.length_hist[candidates.index(n)] += 1
    for name, s in suites.items():
        logger.debug("eval %s: SR %.3f over %d episodes", name, s.success_rate, s.episodes)
    return EvalReport(suites, list(candidates), episodes)
