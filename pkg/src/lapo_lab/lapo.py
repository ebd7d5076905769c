"""Online RL over latent reasoning and action chunks.

One update round::

    collect rollouts from a frozen snapshot
    -> GAE over valid steps (optionally normalized)
    -> epochs x minibatches of total_loss -> backward -> global-norm clip
    -> AdamW step (value head at lr x value_lr_mult)

Per valid step the policy loss is

    S(r_a) + lambda1 * S(r_z) + lambda3 * S(r_end),   S(r) = -min(r A, clip(r, 1-eps_min, 1+eps_max) A)

plus ``lambda2`` times the value MSE. ``r_z`` is a Gaussian likelihood ratio on
the recorded latents; ``r_end`` is the ratio of the sampled latent length.
With lambda1 = lambda3 = 0 and no latents this is action-only PPO.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .chunkgrid import SUITES, ChunkGridEnv, TaskSpec
from .errors import ConfigError, EnvError, NumericAbort, NumericError
from .evaluation import eval_policy
from .io.formats import DumpedStep, DumpedTrajectory, write_checkpoint, write_rollouts
from .io.metrics import NullWriter
from .io.schemas import ExperimentConfig, TrainConfig
from .optim import AdamW, clip_by_global_norm
from .policy import RECORD_DTYPE, VALUE_GROUP, LatentMode, LazyParams, PolicyParams, act, forward_joint, rollout_mode
from .tape import Tape

logger = logging.getLogger(__name__)

RATIO_EXP_BOUND = 20.0
ADV_EPS = 1e-8


# ----------------------------- rollout buffer -----------------------------


@dataclass
class RolloutStep:
    observation: np.ndarray
    task_id: int
    latents: np.ndarray  # (n_latent, d) used prefix
    tail: np.ndarray  # generated latents past the sampled length
    length_index: int  # -1 in fixed mode
    tokens: np.ndarray  # (N_a,)
    logp_a_old: float
    logp_end_old: float
    value: float
    reward: float
    done: bool
    valid: bool = True

    @property
    def n_latent(self) -> int:
        return int(self.latents.shape[0])

    @property
    def z_full(self) -> np.ndarray:
        return np.concatenate([self.latents, self.tail], axis=0)


def padding_step(like: RolloutStep) -> RolloutStep:
    return RolloutStep(
        observation=np.zeros_like(like.observation),
        task_id=0,
        latents=np.zeros_like(like.latents),
        tail=np.zeros_like(like.tail),
        length_index=like.length_index,
        tokens=np.zeros_like(like.tokens),
        logp_a_old=0.0,
        logp_end_old=0.0,
        value=0.0,
        reward=0.0,
        done=True,
        valid=False,
    )


@dataclass
class Trajectory:
    task: TaskSpec
    steps: List[RolloutStep]
    success: bool
    micro_steps: int


@dataclass
class RolloutBuffer:
    trajectories: List[Trajectory]

    @property
    def width(self) -> int:
        return max((len(t.steps) for t in self.trajectories), default=0)

    def padded(self) -> List[List[RolloutStep]]:
        """Every trajectory right-padded to the longest with valid=False steps."""
        rows = []
        for traj in self.trajectories:
            pad = [padding_step(traj.steps[-1]) for _ in range(self.width - len(traj.steps))]
            rows.append(traj.steps + pad)
        return rows

    def arrays(self) -> Dict[str, np.ndarray]:
        rows = self.padded()

        def grid(attr, dtype):
            return np.array([[getattr(s, attr) for s in row] for row in rows], dtype=dtype)

        return {
            "rewards": grid("reward", np.float64),
            "values": grid("value", np.float64),
            "dones": grid("done", np.float64),
            "valid": grid("valid", bool),
        }

    def valid_steps(self) -> List[RolloutStep]:
        return [s for traj in self.trajectories for s in traj.steps if s.valid]

    @property
    def success_rate(self) -> float:
        if not self.trajectories:
            return float("nan")
        return sum(t.success for t in self.trajectories) / len(self.trajectories)

    def length_hist(self, candidates: Sequence[int]) -> List[int]:
        hist = [0] * len(candidates)
        for s in self.valid_steps():
            if s.n_latent in candidates:
                hist[list(candidates).index(s.n_latent)] += 1
        return hist


def _rollout_one(
    tensors: Mapping, cfg: TrainConfig, task: TaskSpec, mode: LatentMode, temperature: float, rng: np.random.Generator
) -> Trajectory:
    env = ChunkGridEnv(task, cfg.success_reward)
    obs = env.reset(int(rng.integers(2**31 - 1)))
    cap = -(-task.t_max // cfg.horizon) + 1
    steps: List[RolloutStep] = []
    micro = 0
    success = False
    for _ in range(cap):
        d = act(tensors, cfg, obs, task.task_id, mode, temperature, rng)
        result = env.step_chunk(d.chunk)
        micro += result.micro_steps
        steps.append(
            RolloutStep(
                observation=np.asarray(obs, dtype=np.float32),
                task_id=task.task_id,
                latents=d.latents,
                tail=d.tail,
                length_index=d.length_index,
                tokens=d.tokens,
                logp_a_old=d.logp_actions,
                logp_end_old=d.logp_end,
                value=d.value,
                reward=result.reward,
                done=result.done,
            )
        )
        obs = result.observation
        if result.done:
            success = result.success
            break
    return Trajectory(task, steps, success, micro)


def collect_rollouts(
    tensors: Mapping,
    cfg: TrainConfig,
    tasks: Sequence[TaskSpec],
    n_traj: int,
    mode: LatentMode,
    seed: int,
    round_index: int = 0,
    workers: int = 1,
    temperature: Optional[float] = None,
) -> RolloutBuffer:
    """``n_traj`` episodes cycling over ``tasks``, merged in trajectory-index order.

    Each trajectory draws from its own generator seeded by (seed, round, index),
    so the buffer does not depend on the number of workers.
    """
    if not tasks:
        raise ConfigError("no tasks to collect rollouts on")
    tau = cfg.temperature if temperature is None else temperature

    def run(i: int) -> Trajectory:
        rng = np.random.default_rng([seed, 2, round_index, i])
        try:
            return _rollout_one(tensors, cfg, tasks[i % len(tasks)], mode, tau, rng)
        except EnvError as e:
            raise EnvError(f"trajectory {i}: {e}") from e

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(run, range(n_traj)))
    else:
        trajectories = [run(i) for i in range(n_traj)]
    return RolloutBuffer(trajectories)


# ----------------------------- advantages -----------------------------


@dataclass
class AdvantageRecord:
    advantages: np.ndarray  # (n_traj, T), zero on padding
    returns: np.ndarray  # (n_traj, T) return targets, before normalization


def gae_arrays(
    rewards: np.ndarray, values: np.ndarray, dones: np.ndarray, valid: np.ndarray, gamma: float, lam: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Backward GAE recursion over (n_traj, T) arrays; bootstrap is 0 past the last valid step."""
    rewards = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    dones = np.atleast_2d(np.asarray(dones, dtype=np.float64))
    valid = np.atleast_2d(np.asarray(valid, dtype=bool))
    n, width = rewards.shape
    adv = np.zeros((n, width))
    last = np.zeros(n)
    for t in reversed(range(width)):
        if t + 1 < width:
            next_valid = valid[:, t + 1].astype(np.float64)
            next_value = values[:, t + 1] * next_valid
        else:
            next_valid = np.zeros(n)
            next_value = np.zeros(n)
        alive = 1.0 - dones[:, t]
        delta = rewards[:, t] + gamma * next_value * alive - values[:, t]
        last = delta + gamma * lam * alive * next_valid * last
        last = np.where(valid[:, t], last, 0.0)
        adv[:, t] = last
    returns = np.where(valid, adv + values, 0.0)
    return adv, returns


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float, normalize: bool = False) -> AdvantageRecord:
    a = buffer.arrays()
    adv, returns = gae_arrays(a["rewards"], a["values"], a["dones"], a["valid"], gamma, lam)
    if normalize:
        adv = normalize_advantages(adv, a["valid"])
    return AdvantageRecord(adv, returns)


def normalize_advantages(adv: np.ndarray, valid: np.ndarray) -> np.ndarray:
    picked = adv[valid]
    if picked.size == 0:
        return adv
    out = (adv - picked.mean()) / (picked.std() + ADV_EPS)
    return np.where(valid, out, 0.0)


# ----------------------------- ratios and surrogate -----------------------------


@dataclass
class RatioTerm:
    node: int  # (B,)
    clamped: np.ndarray  # (B,) bool, exponent hit a bound


def _clamped_exp(tape: Tape, exponent: int, lo: float, hi: float) -> RatioTerm:
    raw = tape.value(exponent)
    return RatioTerm(tape.exp(tape.clip(exponent, lo, hi)), (raw < lo) | (raw > hi))


def ratio_action(tape: Tape, logp_new: int, logp_old: np.ndarray) -> RatioTerm:
    diff = tape.sub(logp_new, tape.constant(np.asarray(logp_old)))
    return _clamped_exp(tape, diff, -RATIO_EXP_BOUND, RATIO_EXP_BOUND)


def ratio_end(tape: Tape, logp_new: int, logp_old: np.ndarray) -> RatioTerm:
    return ratio_action(tape, logp_new, logp_old)


def ratio_latent(tape: Tape, z_old: np.ndarray, z_theta: int, sigma: float, mask: Optional[np.ndarray] = None) -> RatioTerm:
    """exp(-sum_k ||z_old_k - z_theta_k||^2 / (2 sigma^2)) over (B, N, d); ``mask`` (B, N, 1) picks used latents."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be > 0, got {sigma}")
    diff = tape.sub(z_theta, tape.constant(np.asarray(z_old)))
    sq = tape.square(diff)
    if mask is not None:
        sq = tape.mul(sq, tape.constant(mask))
    dist = tape.sum(tape.sum(sq, axis=-1), axis=-1)
    return _clamped_exp(tape, tape.scale(dist, -1.0 / (2.0 * sigma**2)), -RATIO_EXP_BOUND, 0.0)


def clipped_surrogate(tape: Tape, ratio: int, advantages: np.ndarray, eps_min: float, eps_max: float) -> int:
    """Per-step ``-min(r A, clip(r, 1-eps_min, 1+eps_max) A)``; advantages are constants."""
    adv = tape.constant(np.asarray(advantages))
    unclipped = tape.mul(ratio, adv)
    clipped = tape.mul(tape.clip(ratio, 1.0 - eps_min, 1.0 + eps_max), adv)
    return tape.neg(tape.minimum(unclipped, clipped))


# ----------------------------- joint loss -----------------------------


@dataclass
class StepBatch:
    observations: np.ndarray
    task_ids: np.ndarray
    z_full: np.ndarray
    n_used: np.ndarray
    tokens: np.ndarray
    length_index: np.ndarray
    logp_a_old: np.ndarray
    logp_end_old: np.ndarray
    values: np.ndarray

    @classmethod
    def from_steps(cls, steps: Sequence[RolloutStep], cfg: TrainConfig) -> "StepBatch":
        width = cfg.n_max if cfg.adaptive else cfg.fixed_len
        z = np.zeros((len(steps), width, cfg.d_model), dtype=np.float32)
        for b, s in enumerate(steps):
            full = s.z_full
            z[b, : len(full)] = full
        return cls(
            observations=np.stack([s.observation for s in steps]),
            task_ids=np.array([s.task_id for s in steps], dtype=np.int64),
            z_full=z,
            n_used=np.array([s.n_latent for s in steps], dtype=np.int64),
            tokens=np.stack([s.tokens for s in steps]),
            length_index=np.array([max(s.length_index, 0) for s in steps], dtype=np.int64),
            logp_a_old=np.array([s.logp_a_old for s in steps], dtype=np.float64),
            logp_end_old=np.array([s.logp_end_old for s in steps], dtype=np.float64),
            values=np.array([s.value for s in steps], dtype=np.float64),
        )


@dataclass
class LossParts:
    total: int
    ratio_a: RatioTerm
    ratio_z: Optional[RatioTerm]
    ratio_end: Optional[RatioTerm]
    surrogate_a: int
    surrogate_z: Optional[int]
    surrogate_end: Optional[int]
    value_loss: int
    count: int


def _batch_mean(tape: Tape, per_step: int, count: int) -> int:
    return tape.scale(tape.sum(per_step), 1.0 / count)


def total_loss(
    tape: Tape,
    p: Mapping,
    cfg: TrainConfig,
    steps: Sequence[RolloutStep],
    advantages: np.ndarray,
    returns: np.ndarray,
) -> LossParts:
    """Joint clipped loss over the valid steps of a minibatch; padding steps are dropped."""
    keep = [i for i, s in enumerate(steps) if s.valid]
    if not keep:
        raise ValueError("total_loss: minibatch has no valid steps")
    picked = [steps[i] for i in keep]
    adv = np.asarray(advantages, dtype=np.float64)[keep]
    ret = np.asarray(returns, dtype=np.float64)[keep]
    batch = StepBatch.from_steps(picked, cfg)
    count = len(picked)
    out = forward_joint(
        tape, p, cfg, batch.observations, batch.task_ids, batch.z_full, batch.n_used, batch.tokens, batch.length_index
    )

    r_a = ratio_action(tape, out.logp_actions, batch.logp_a_old)
    surr_a = _batch_mean(tape, clipped_surrogate(tape, r_a.node, adv, cfg.eps_min, cfg.eps_max), count)
    policy = surr_a

    r_z = surr_z = None
    if out.z_theta is not None:
        r_z = ratio_latent(tape, batch.z_full, out.z_theta, cfg.sigma, out.latent_mask)
        surr_z = _batch_mean(tape, clipped_surrogate(tape, r_z.node, adv, cfg.eps_min, cfg.eps_max), count)
        if cfg.lambda1 > 0:
            policy = tape.add(policy, tape.scale(surr_z, cfg.lambda1))

    r_end = surr_end = None
    if cfg.adaptive and out.logp_end is not None:
        r_end = ratio_end(tape, out.logp_end, batch.logp_end_old)
        surr_end = _batch_mean(tape, clipped_surrogate(tape, r_end.node, adv, cfg.eps_min, cfg.eps_max), count)
        if cfg.lambda3 > 0:
            policy = tape.add(policy, tape.scale(surr_end, cfg.lambda3))

    value_loss = _batch_mean(tape, tape.square(tape.sub(out.value, tape.constant(ret))), count)
    total = tape.add(policy, tape.scale(value_loss, cfg.lambda2))
    return LossParts(total, r_a, r_z, r_end, surr_a, surr_z, surr_end, value_loss, count)


def _scalar(tape: Tape, node: Optional[int]) -> Optional[float]:
    return None if node is None else float(np.asarray(tape.value(node)).reshape(()))


def loss_stats(tape: Tape, parts: LossParts, cfg: TrainConfig) -> Dict[str, Optional[float]]:
    ra = tape.value(parts.ratio_a.node).astype(np.float64)
    stats = {
        "loss_total": _scalar(tape, parts.total),
        "loss_action": _scalar(tape, parts.surrogate_a),
        "loss_latent": _scalar(tape, parts.surrogate_z),
        "loss_end": _scalar(tape, parts.surrogate_end),
        "loss_value": _scalar(tape, parts.value_loss),
        "ratio_a_min": float(ra.min()),
        "ratio_a_mean": float(ra.mean()),
        "ratio_a_max": float(ra.max()),
        "clip_frac": float(np.mean((ra < 1.0 - cfg.eps_min) | (ra > 1.0 + cfg.eps_max))),
        "clamped": int(parts.ratio_a.clamped.sum()),
    }
    for key, term in (("ratio_z", parts.ratio_z), ("ratio_end", parts.ratio_end)):
        if term is None:
            stats.update({f"{key}_min": None, f"{key}_mean": None, f"{key}_max": None})
            continue
        r = tape.value(term.node).astype(np.float64)
        stats.update({f"{key}_min": float(r.min()), f"{key}_mean": float(r.mean()), f"{key}_max": float(r.max())})
        stats["clamped"] += int(term.clamped.sum())
    return stats


def ratio_identity_gap(tensors: Mapping, cfg: TrainConfig, steps: Sequence[RolloutStep], chunk: int = 64) -> float:
    """max |r - 1| over all three ratios and every valid step, under ``tensors``."""
    gap = 0.0
    valid = [s for s in steps if s.valid]
    for start in range(0, len(valid), chunk):
        part = valid[start : start + chunk]
        tape = Tape(dtype=RECORD_DTYPE)
        zeros = np.zeros(len(part))
        parts = total_loss(tape, LazyParams(tape, tensors), cfg, part, zeros, zeros)
        for term in (parts.ratio_a, parts.ratio_z, parts.ratio_end):
            if term is not None:
                gap = max(gap, float(np.max(np.abs(tape.value(term.node).astype(np.float64) - 1.0))))
    return gap


def explained_variance(values: np.ndarray, returns: np.ndarray) -> float:
    var = float(np.var(returns))
    if var == 0.0:
        return float("nan")
    return 1.0 - float(np.var(returns - values)) / var


# ----------------------------- training loop -----------------------------


@dataclass
class TaskSplit:
    seen: List[TaskSpec]
    holdout: List[TaskSpec] = field(default_factory=list)


def holdout_protocol(exp: ExperimentConfig) -> TaskSplit:
    """Seen tasks exclude the held-out variant of every selected suite."""
    cfg = exp.train
    seen, holdout = [], []
    for suite in exp.suites:
        if suite not in SUITES:
            raise ConfigError(f"unknown suite {suite!r}")
        for v in range(cfg.n_variants):
            task = TaskSpec(suite, v, cfg.n_variants, cfg.grid_size)
            (holdout if v == exp.holdout_variant else seen).append(task)
    if not seen:
        raise ConfigError("holdout leaves no training tasks")
    return TaskSplit(seen, holdout)


def dump_buffer(buffer: RolloutBuffer) -> List[DumpedTrajectory]:
    dumped = []
    for traj in buffer.trajectories:
        steps = [
            DumpedStep(
                s.observation, s.latents, s.length_index, s.tokens, s.logp_a_old, s.logp_end_old, s.value, s.reward, s.done
            )
            for s in traj.steps
        ]
        dumped.append(DumpedTrajectory(traj.task.suite, traj.task.variant, steps))
    return dumped


def _evaluate(params: PolicyParams, cfg: TrainConfig, split: TaskSplit, seed: int) -> Dict[str, object]:
    tensors = params.snapshot()
    seen = eval_policy(tensors, cfg, split.seen, cfg.eval_rollouts, seed, workers=cfg.rollout_workers)
    record: Dict[str, object] = {
        "seen_success": seen.success_rate,
        "holdout_success": None,
        "mean_episode_steps": seen.mean_episode_steps,
        "length_hist": seen.length_hist,
    }
    if split.holdout:
        held = eval_policy(tensors, cfg, split.holdout, cfg.eval_rollouts, seed, workers=cfg.rollout_workers)
        record["holdout_success"] = held.success_rate
    return record


_EMPTY_EVAL = {"seen_success": None, "holdout_success": None, "mean_episode_steps": None, "length_hist": None}
_STAT_KEYS = (
    "loss_action",
    "loss_latent",
    "loss_value",
    "loss_end",
    "ratio_a_mean",
    "ratio_z_mean",
    "clip_frac",
)


def _mean_stats(rows: List[Dict[str, Optional[float]]]) -> Dict[str, Optional[float]]:
    out: Dict[str, Optional[float]] = {}
    for key in rows[0]:
        vals = [r[key] for r in rows if r[key] is not None]
        if key.endswith("_min"):
            out[key] = min(vals) if vals else None
        elif key.endswith("_max"):
            out[key] = max(vals) if vals else None
        elif key == "clamped":
            out[key] = int(sum(vals))
        else:
            out[key] = float(np.mean(vals)) if vals else None
    return out


def rl_update(
    params: PolicyParams,
    cfg: TrainConfig,
    opt: AdamW,
    buffer: RolloutBuffer,
    rng: np.random.Generator,
) -> Dict[str, object]:
    """GAE then ``epochs`` passes of ``minibatches`` optimizer steps over the buffer."""
    record = compute_gae(buffer, cfg.gamma, cfg.gae_lambda, cfg.normalize_advantages)
    rows = buffer.padded()
    arrays = buffer.arrays()
    flat = [(i, t) for i, row in enumerate(rows) for t, s in enumerate(row) if s.valid]
    if not flat:
        raise ValueError("rollout buffer has no valid steps")
    steps = [rows[i][t] for i, t in flat]
    adv = np.array([record.advantages[i, t] for i, t in flat])
    ret = np.array([record.returns[i, t] for i, t in flat])
    old_values = np.array([arrays["values"][i, t] for i, t in flat])

    gap = ratio_identity_gap(params.tensors, cfg, steps)
    norms, stats = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(steps))
        for idx in np.array_split(order, min(cfg.minibatches, len(steps))):
            tape = Tape(dtype=RECORD_DTYPE)
            p = LazyParams(tape, params.tensors)
            parts = total_loss(tape, p, cfg, [steps[i] for i in idx], adv[idx], ret[idx])
            grads, norm = clip_by_global_norm(p.gradients(tape.backward(parts.total)), cfg.grad_clip)
            opt.step(params, grads, cfg.actor_lr)
            norms.append(norm)
            stats.append(loss_stats(tape, parts, cfg))
    if gap > 1e-5:
        logger.warning("first-epoch ratios deviate from 1 by %.2e", gap)
    summary = _mean_stats(stats)
    summary.update(
        {
            "explained_var": explained_variance(old_values, ret),
            "grad_norm": float(np.mean(norms)),
            "grad_norm_max": float(np.max(norms)),
            "first_ratio_dev": gap,
            "adv_mean": float(adv.mean()),
        }
    )
    return summary


def train_rl(
    cfg: TrainConfig,
    params: PolicyParams,
    split: TaskSplit,
    seed: int,
    writer=None,
    checkpoint_dir: Optional[Path] = None,
    dump_path: Optional[Path] = None,
) -> PolicyParams:
    """Online RL from a warm-started policy; writes one metrics record per update.

    Update 0 is an evaluation-only record of the starting policy. On a
    non-finite value the parameters from before the failing update are saved as
    ``last_good.ckpt`` and :class:`NumericAbort` is raised.
    """
    writer = writer or NullWriter()
    mode = rollout_mode(cfg)
    AdamW.reset(params)
    opt = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.rl_weight_decay, {VALUE_GROUP: cfg.value_lr_mult})
    rng = np.random.default_rng([seed, 4])
    logger.info(
        "RL: %d seen tasks, %d held out, %d updates of %d rollouts (%s)",
        len(split.seen),
        len(split.holdout),
        cfg.updates,
        cfg.rollout_batch,
        cfg.latent_mode,
    )

    first = {"update": 0, **_evaluate(params, cfg, split, seed)}
    first.update({key: None for key in _STAT_KEYS})
    first.update({"explained_var": None, "grad_norm": None})
    writer.write(first)
    logger.info("update 0: seen SR %.3f", first["seen_success"])

    buffer = None
    for update in range(1, cfg.updates + 1):
        last_good = params.copy()
        try:
            buffer = collect_rollouts(
                params.snapshot(), cfg, split.seen, cfg.rollout_batch, mode, seed, update, cfg.rollout_workers
            )
            summary = rl_update(params, cfg, opt, buffer, rng)
            evaluated = update % cfg.eval_every == 0 or update == cfg.updates
            evaluation = _evaluate(params, cfg, split, seed) if evaluated else dict(_EMPTY_EVAL)
        except NumericError as e:
            saved = None
            if checkpoint_dir is not None:
                saved = Path(checkpoint_dir) / "last_good.ckpt"
                write_checkpoint(saved, last_good.to_groups())
            raise NumericAbort(f"non-finite value at update {update}: {e}", str(saved) if saved else None) from e

        row = {"update": update}
        row.update(evaluation)
        row.update(summary)
        row["rollout_success"] = buffer.success_rate
        row["rollout_length_hist"] = buffer.length_hist(cfg.candidates) if cfg.adaptive else []
        writer.write(row)
        if evaluated:
            logger.info(
                "update %d: seen SR %.3f, mean steps %.1f, rollout SR %.3f",
                update,
                row["seen_success"],
                row["mean_episode_steps"],
                row["rollout_success"],
            )
        else:
            logger.debug("update %d: loss_action %.4f, clip %.3f", update, summary["loss_action"], summary["clip_frac"])
        if evaluated and checkpoint_dir is not None:
            write_checkpoint(Path(checkpoint_dir) / "rl_latest.ckpt", params.to_groups())

    if dump_path is not None and buffer is not None:
        write_rollouts(dump_path, dump_buffer(buffer), cfg.d_model, cfg.n_tokens)
    return params


def success_gain(history: Sequence[Dict[str, object]], key: str = "seen_success") -> float:
    """Last minus first logged value of ``key``, ignoring updates without evaluation."""
    vals = [r[key] for r in history if r.get(key) is not None]
    if not vals:
        return math.nan
    return float(vals[-1]) - float(vals[0])
