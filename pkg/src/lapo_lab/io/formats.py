"""Binary file formats: demos, latent cache, checkpoints and rollout dumps.

All integers are little-endian u32, all floats little-endian f32. Every file
starts with an 8-byte magic. Parse errors raise :class:`FormatError` carrying
the byte offset where reading failed.

Demo file (``LAPODEM1``)::

    u32 count
    per trajectory: u32 suite id, u32 variant, u32 steps,
        per step: OBS_DIM f32 observation, H*A f32 actions

Latent cache (``LAPOLAT1``)::

    u32 count
    per record: u32 traj, u32 t, u32 j, k f32

Checkpoint (``LAPOCKP1``)::

    u32 version, u32 groups
    per group: u32 name length, utf-8 name, u32 ndims, ndims u32 dims, f32 data

Rollout dump (``LAPOROL1``)::

    u32 version, u32 trajectories, u32 d_model, u32 n_tokens
    per trajectory: u32 suite id, u32 variant, u32 steps,
        per step: OBS_DIM f32 observation, u32 n_latent, n_latent*d f32 latents,
        u32 length index (0xFFFFFFFF when fixed), n_tokens u32 tokens,
        f32 logp_a, f32 logp_end, f32 value, f32 reward, u32 done
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..chunkgrid import OBS_DIM, SUITE_IDS, SUITES, DemoTrajectory
from ..errors import FormatError

logger = logging.getLogger(__name__)

DEMO_MAGIC = b"LAPODEM1"
CACHE_MAGIC = b"LAPOLAT1"
CHECKPOINT_MAGIC = b"LAPOCKP1"
ROLLOUT_MAGIC = b"LAPOROL1"
CHECKPOINT_VERSION = 1
ROLLOUT_VERSION = 1
NO_INDEX = 0xFFFFFFFF

_U32 = struct.Struct("<I")


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(f"unexpected end of file (needed {n} bytes)", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def magic(self, expected: bytes) -> None:
        start = self.offset
        if self.take(len(expected)) != expected:
            raise FormatError(f"bad magic, expected {expected.decode()}", start)

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def f32(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)

    def u32s(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<u4").astype(np.int64)

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise FormatError(f"{len(self.data) - self.offset} trailing bytes", self.offset)


def _u32(v: int) -> bytes:
    return _U32.pack(int(v))


def _f32(arr) -> bytes:
    return np.asarray(arr, dtype="<f4").tobytes()


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ----------------------------- demos -----------------------------


def encode_demos(demos: Sequence[DemoTrajectory]) -> bytes:
    parts = [DEMO_MAGIC, _u32(len(demos))]
    for traj in demos:
        parts += [_u32(SUITE_IDS[traj.suite]), _u32(traj.variant), _u32(traj.n_steps)]
        for t in range(traj.n_steps):
            parts.append(_f32(traj.observations[t]))
            parts.append(_f32(traj.actions[t].reshape(-1)))
    return b"".join(parts)


def decode_demos(data: bytes, horizon: int, action_dim: int) -> List[DemoTrajectory]:
    r = _Reader(data)
    r.magic(DEMO_MAGIC)
    count = r.u32()
    demos = []
    for _ in range(count):
        at = r.offset
        suite_id = r.u32()
        if suite_id >= len(SUITES):
            raise FormatError(f"unknown suite id {suite_id}", at)
        variant = r.u32()
        steps = r.u32()
        obs = np.zeros((steps, OBS_DIM), dtype=np.float32)
        actions = np.zeros((steps, horizon, action_dim), dtype=np.float32)
        for t in range(steps):
            obs[t] = r.f32(OBS_DIM)
            actions[t] = r.f32(horizon * action_dim).reshape(horizon, action_dim)
        demos.append(DemoTrajectory(SUITES[suite_id], variant, obs, actions))
    r.finish()
    return demos


def write_demos(path: Path, demos: Sequence[DemoTrajectory]) -> None:
    _atomic_write(path, encode_demos(demos))
    logger.info("Wrote %d demo trajectories to %s", len(demos), path)


def read_demos(path: Path, horizon: int, action_dim: int) -> List[DemoTrajectory]:
    return decode_demos(Path(path).read_bytes(), horizon, action_dim)


# ----------------------------- latent cache -----------------------------


def encode_cache(records: Sequence[Tuple[Tuple[int, int, int], np.ndarray]]) -> bytes:
    parts = [CACHE_MAGIC, _u32(len(records))]
    for (traj, t, j), vec in records:
        parts += [_u32(traj), _u32(t), _u32(j), _f32(vec)]
    return b"".join(parts)


def decode_cache(data: bytes, k: int) -> List[Tuple[Tuple[int, int, int], np.ndarray]]:
    r = _Reader(data)
    r.magic(CACHE_MAGIC)
    count = r.u32()
    records = []
    for _ in range(count):
        key = (r.u32(), r.u32(), r.u32())
        records.append((key, r.f32(k)))
    r.finish()
    return records


def write_cache(path: Path, records) -> None:
    _atomic_write(path, encode_cache(records))
    logger.info("Wrote %d latent targets to %s", len(records), path)


def read_cache(path: Path, k: int):
    return decode_cache(Path(path).read_bytes(), k)


# ----------------------------- checkpoints -----------------------------


def encode_checkpoint(groups: Dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, _u32(CHECKPOINT_VERSION), _u32(len(groups))]
    for name in sorted(groups):
        arr = np.asarray(groups[name], dtype=np.float32)
        raw = name.encode("utf-8")
        parts += [_u32(len(raw)), raw, _u32(arr.ndim)]
        parts += [_u32(d) for d in arr.shape]
        parts.append(_f32(arr.reshape(-1)))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Dict[str, np.ndarray]:
    r = _Reader(data)
    r.magic(CHECKPOINT_MAGIC)
    at = r.offset
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", at)
    count = r.u32()
    groups: Dict[str, np.ndarray] = {}
    for _ in range(count):
        at = r.offset
        length = r.u32()
        try:
            name = r.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("group name is not utf-8", at) from None
        ndims = r.u32()
        dims = tuple(int(d) for d in r.u32s(ndims))
        size = int(np.prod(dims)) if dims else 1
        groups[name] = r.f32(size).reshape(dims)
    r.finish()
    return groups


def write_checkpoint(path: Path, groups: Dict[str, np.ndarray]) -> None:
    _atomic_write(path, encode_checkpoint(groups))
    logger.debug("Wrote checkpoint %s (%d groups)", path, len(groups))


def read_checkpoint(path: Path) -> Dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())


# ----------------------------- rollout dumps -----------------------------


@dataclass
class DumpedStep:
    observation: np.ndarray
    latents: np.ndarray
    length_index: int
    tokens: np.ndarray
    logp_a: float
    logp_end: float
    value: float
    reward: float
    done: bool


@dataclass
class DumpedTrajectory:
    suite: str
    variant: int
    steps: List[DumpedStep]


def encode_rollouts(trajectories: Sequence[DumpedTrajectory], d_model: int, n_tokens: int) -> bytes:
    parts = [ROLLOUT_MAGIC, _u32(ROLLOUT_VERSION), _u32(len(trajectories)), _u32(d_model), _u32(n_tokens)]
    for traj in trajectories:
        parts += [_u32(SUITE_IDS[traj.suite]), _u32(traj.variant), _u32(len(traj.steps))]
        for s in traj.steps:
            parts.append(_f32(s.observation))
            parts.append(_u32(s.latents.shape[0]))
            parts.append(_f32(s.latents.reshape(-1)))
            parts.append(_u32(NO_INDEX if s.length_index < 0 else s.length_index))
            parts.append(np.asarray(s.tokens, dtype="<u4").tobytes())
            parts.append(_f32([s.logp_a, s.logp_end, s.value, s.reward]))
            parts.append(_u32(1 if s.done else 0))
    return b"".join(parts)


def decode_rollouts(data: bytes) -> Tuple[List[DumpedTrajectory], int, int]:
    r = _Reader(data)
    r.magic(ROLLOUT_MAGIC)
    at = r.offset
    version = r.u32()
    if version != ROLLOUT_VERSION:
        raise FormatError(f"unsupported rollout dump version {version}", at)
    count, d_model, n_tokens = r.u32(), r.u32(), r.u32()
    trajectories = []
    for _ in range(count):
        at = r.offset
        suite_id = r.u32()
        if suite_id >= len(SUITES):
            raise FormatError(f"unknown suite id {suite_id}", at)
        variant, n_steps = r.u32(), r.u32()
        steps = []
        for _ in range(n_steps):
            obs = r.f32(OBS_DIM)
            n_latent = r.u32()
            latents = r.f32(n_latent * d_model).reshape(n_latent, d_model)
            index = r.u32()
            tokens = r.u32s(n_tokens)
            logp_a, logp_end, value, reward = (float(x) for x in r.f32(4))
            done = r.u32() != 0
            steps.append(
                DumpedStep(obs, latents, -1 if index == NO_INDEX else index, tokens, logp_a, logp_end, value, reward, done)
            )
        trajectories.append(DumpedTrajectory(SUITES[suite_id], variant, steps))
    r.finish()
    return trajectories, d_model, n_tokens


def write_rollouts(path: Path, trajectories: Sequence[DumpedTrajectory], d_model: int, n_tokens: int) -> None:
    _atomic_write(path, encode_rollouts(trajectories, d_model, n_tokens))
    logger.info("Dumped %d rollouts to %s", len(trajectories), path)


def read_rollouts(path: Path):
    return decode_rollouts(Path(path).read_bytes())
