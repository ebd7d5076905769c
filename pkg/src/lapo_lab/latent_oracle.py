"""Ground-truth latent targets for the supervised warm-up.

A frozen random two-layer map of the encoded environment state stands in for
a vision foundation model. Its output is compressed to ``k`` channels by
magnitude and cached offline per (trajectory, decision step, horizon index).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .chunkgrid import OBS_DIM, DemoTrajectory, EnvState, encode_observation, micro_states
from .errors import CacheError

logger = logging.getLogger(__name__)

CacheKey = Tuple[int, int, int]


class FeatureTeacher:
    """tanh(W2 . tanh(W1 . phi)) with weights drawn once from ``seed``."""

    def __init__(self, seed: int = 0, dim: int = 256, hidden: int = 256, obs_dim: int = OBS_DIM):
        rng = np.random.default_rng(seed)
        self._w1 = rng.standard_normal((hidden, obs_dim)) / np.sqrt(obs_dim)
        self._w2 = rng.standard_normal((dim, hidden)) / np.sqrt(hidden)
        self._w1.setflags(write=False)
        self._w2.setflags(write=False)
        self.dim = dim

    def features_from_obs(self, obs: np.ndarray) -> np.ndarray:
        phi = np.asarray(obs, dtype=np.float64)
        return np.tanh(self._w2 @ np.tanh(self._w1 @ phi)).astype(np.float32)

    def features(self, state: EnvState) -> np.ndarray:
        return self.features_from_obs(encode_observation(state))


def topk_select(v: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest-magnitude channels in their original order.

    Ties go to the lower channel index.
    """
    v = np.asarray(v)
    if not 1 <= k <= v.shape[-1]:
        raise ValueError(f"k must be in [1, {v.shape[-1]}], got {k}")
    order = np.argsort(-np.abs(v), kind="stable")
    return v[np.sort(order[:k])]


@dataclass(frozen=True)
class LatentTarget:
    vector: np.ndarray
    source: CacheKey


def future_targets(
    traj: DemoTrajectory,
    t: int,
    n_z: int,
    teacher: FeatureTeacher,
    k: int,
    stride: int = 1,
    grid_size: int = 8,
    states: Optional[List[EnvState]] = None,
    traj_id: int = 0,
) -> List[LatentTarget]:
    """Targets j = 1..n_z from the state ``j * stride`` micro-steps after step t.

    Indices past the last replayed state are clamped to it.
    """
    if not 0 <= t < traj.n_steps:
        raise IndexError(f"step {t} outside trajectory of {traj.n_steps} steps")
    if states is None or traj.valid_micro is None:
        states, counts = micro_states(traj, grid_size)
        traj.valid_micro = counts
    start = int(np.sum(traj.valid_micro[:t]))
    last = len(states) - 1
    targets = []
    for j in range(1, n_z + 1):
        state = states[min(start + j * stride, last)]
        targets.append(LatentTarget(topk_select(teacher.features(state), k), (traj_id, t, j)))
    return targets


def _trajectory_records(
    traj_id: int, traj: DemoTrajectory, teacher: FeatureTeacher, k: int, n_max: int, stride: int, grid_size: int
) -> List[Tuple[CacheKey, np.ndarray]]:
    states, counts = micro_states(traj, grid_size)
    traj.valid_micro = counts
    records = []
    for t in range(traj.n_steps):
        for target in future_targets(traj, t, n_max, teacher, k, stride, grid_size, states, traj_id):
            records.append((target.source, target.vector))
    return records


def build_cache_records(
    demos: Sequence[DemoTrajectory],
    teacher: FeatureTeacher,
    k: int,
    n_max: int,
    stride: int = 1,
    grid_size: int = 8,
    workers: int = 1,
) -> List[Tuple[CacheKey, np.ndarray]]:
    """Targets for every (traj, t, j <= n_max), in canonical sort order."""
    jobs = list(enumerate(demos))
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            shards = list(
                pool.map(lambda job: _trajectory_records(*job, teacher, k, n_max, stride, grid_size), jobs)
            )
    else:
        shards = [_trajectory_records(i, traj, teacher, k, n_max, stride, grid_size) for i, traj in jobs]
    records = [rec for shard in shards for rec in shard]
    records.sort(key=lambda rec: rec[0])
    logger.info("Built %d latent targets from %d trajectories", len(records), len(jobs))
    return records


class LatentCache:
    """In-memory view of a latent-cache file."""

    def __init__(self, records: Iterable[Tuple[CacheKey, np.ndarray]]):
        self._table: Dict[CacheKey, np.ndarray] = {key: vec for key, vec in records}

    def __len__(self) -> int:
        return len(self._table)

    def __contains__(self, key: CacheKey) -> bool:
        return key in self._table

    def lookup(self, traj: int, t: int, j: int) -> np.ndarray:
        try:
            return self._table[(traj, t, j)]
        except KeyError:
            raise CacheError(f"latent cache has no entry for (traj={traj}, t={t}, j={j})") from None

    def targets(self, traj: int, t: int, n_z: int) -> np.ndarray:
        if n_z == 0:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self.lookup(traj, t, j) for j in range(1, n_z + 1)])

    @property
    def dim(self) -> int:
        for vec in self._table.values():
            return int(vec.shape[0])
        return 0

    def require(self, demos: Sequence[DemoTrajectory], n_max: int) -> None:
        """Raise on the first (traj, t, j) the SFT loader could ask for and not find."""
        for i, traj in enumerate(demos):
            for t in range(traj.n_steps):
                for j in range(1, n_max + 1):
                    if (i, t, j) not in self._table:
                        raise CacheError(f"latent cache is missing (traj={i}, t={t}, j={j})")
