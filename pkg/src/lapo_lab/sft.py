"""Supervised warm-up from expert demonstrations.

Loss per batch, weighted 1 : 0.1 : 1 by default::

    w_latent * mean_k (1 - cos(z_hat_k, z*_k))
  + w_end    * CE(end vs continue at every candidate <= N_z)
  + w_action * mean_j CE(action logits_j, token_j)

Each term is averaged per sample first, then over the batch. Action tokens of
micro-steps that were never executed (chunks cut short by episode end) are
masked out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .action_codec import N_BINS, ActionChunk, tokenize
from .chunkgrid import DemoTrajectory, TaskSpec, ensure_valid_micro
from .io.metrics import NullWriter
from .io.schemas import TrainConfig
from .latent_oracle import LatentCache
from .optim import AdamW, clip_by_global_norm, cosine_lr
from .policy import LazyParams, PolicyParams, forward_batch, init_params
from .tape import Tape

logger = logging.getLogger(__name__)

COS_EPS = 1e-8


@dataclass
class SftExample:
    traj: int
    t: int
    observation: np.ndarray
    task_id: int
    tokens: np.ndarray  # (N_a,)
    token_mask: np.ndarray  # (N_a,) 1.0 where the micro-step was executed


@dataclass
class SftSample:
    example: SftExample
    n_z: int
    targets: np.ndarray  # (n_z, d)


@dataclass
class SftBatch:
    samples: List[SftSample]

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class SftTerms:
    total: int
    latent: Optional[int]
    end: Optional[int]
    action: int


def sample_train_length(rng: np.random.Generator, cfg: TrainConfig) -> int:
    if not cfg.adaptive:
        return cfg.fixed_len
    return cfg.candidates[int(rng.integers(len(cfg.candidates)))]


def build_examples(demos: Sequence[DemoTrajectory], cfg: TrainConfig) -> List[SftExample]:
    examples = []
    for i, traj in enumerate(demos):
        ensure_valid_micro(traj, cfg.grid_size)
        task = TaskSpec(traj.suite, traj.variant, cfg.n_variants, cfg.grid_size)
        for t in range(traj.n_steps):
            tokens = tokenize(ActionChunk(traj.actions[t])).tokens
            executed = np.arange(cfg.horizon) < traj.valid_micro[t]
            mask = np.repeat(executed, cfg.action_dim).astype(np.float32)
            examples.append(SftExample(i, t, traj.observations[t], task.task_id, tokens, mask))
    return examples


def assemble_batch(
    examples: Sequence[SftExample], cache: LatentCache, cfg: TrainConfig, rng: np.random.Generator, size: int
) -> SftBatch:
    picks = rng.integers(len(examples), size=size)
    samples = []
    for i in picks:
        ex = examples[int(i)]
        n_z = sample_train_length(rng, cfg)
        samples.append(SftSample(ex, n_z, cache.targets(ex.traj, ex.t, n_z)))
    return SftBatch(samples)


# ----------------------------- loss terms -----------------------------


def latent_cosine_loss(tape: Tape, preds: int, targets: np.ndarray, n_z: np.ndarray) -> int:
    """mean over samples of mean_k (1 - cos); ``targets`` (B, N, d) zero-padded past n_z."""
    n_z = np.asarray(n_z)
    n = targets.shape[1]
    used = (np.arange(n)[None, :] < n_z[:, None]).astype(np.float64)
    rows = max(int(np.count_nonzero(n_z)), 1)
    weights = used / np.maximum(n_z, 1)[:, None] / rows
    target_norm = np.linalg.norm(targets.astype(np.float64), axis=-1)
    dot = tape.sum(tape.mul(preds, tape.constant(targets)), axis=-1)
    pred_norm = tape.sqrt(tape.add(tape.sum(tape.square(preds), axis=-1), tape.constant(COS_EPS**2)))
    denom = tape.add(tape.mul(pred_norm, tape.constant(target_norm)), tape.constant(COS_EPS))
    cos = tape.div(dot, denom)
    weighted = tape.sum(tape.sum(tape.mul(cos, tape.constant(weights)), axis=-1), axis=-1)
    return tape.sub(tape.constant(1.0), weighted)


def end_ce_loss(tape: Tape, end_logits: int, n_z: np.ndarray, candidates: Sequence[int]) -> int:
    """Binary CE at each candidate c <= n_z: label end at c == n_z, continue before it."""
    n_z = np.asarray(n_z)
    reached = np.asarray(candidates)[None, :]
    sign = np.where(reached == n_z[:, None], 1.0, np.where(reached < n_z[:, None], -1.0, 0.0))
    active = (sign != 0).astype(np.float64)
    per_sample = active.sum(axis=1)
    rows = max(int(np.count_nonzero(per_sample)), 1)
    weights = active / np.maximum(per_sample, 1)[:, None] / rows
    signed = tape.mul(end_logits, tape.constant(sign[:, None, :]))
    picked = tape.mul(tape.log_sigmoid(signed), tape.constant(weights[:, None, :]))
    return tape.neg(tape.sum(tape.sum(tape.sum(picked, axis=-1), axis=-1), axis=-1))


def action_ce_loss(tape: Tape, action_logits: int, tokens: np.ndarray, token_mask: np.ndarray) -> int:
    token_mask = np.asarray(token_mask, dtype=np.float64)
    counts = np.maximum(token_mask.sum(axis=1), 1.0)
    weights = token_mask / counts[:, None] / len(token_mask)
    onehot = np.eye(N_BINS, dtype=np.float32)[np.asarray(tokens, dtype=np.int64)]
    logp = tape.sum(tape.mul(tape.log_softmax(action_logits), tape.constant(onehot)), axis=-1)
    return tape.neg(tape.sum(tape.sum(tape.mul(logp, tape.constant(weights)), axis=-1), axis=-1))


def sft_loss(tape: Tape, p, cfg: TrainConfig, batch: SftBatch) -> SftTerms:
    samples = batch.samples
    if not samples:
        raise ValueError("empty SFT batch")
    n_z = np.array([s.n_z for s in samples], dtype=np.int64)
    width = int(n_z.max())
    targets = np.zeros((len(samples), width, cfg.d_model), dtype=np.float32)
    for b, s in enumerate(samples):
        if s.n_z:
            targets[b, : s.n_z] = s.targets
    out = forward_batch(
        tape,
        p,
        cfg,
        np.stack([s.example.observation for s in samples]),
        np.array([s.example.task_id for s in samples]),
        targets,
        n_z,
    )
    parts = []
    latent = end = None
    if width:
        latent = latent_cosine_loss(tape, out.latent_preds, targets, n_z)
        parts.append(tape.scale(latent, cfg.w_latent))
    if cfg.adaptive and out.end_logits is not None:
        reached = [c for c in cfg.candidates if c <= width]
        end = end_ce_loss(tape, out.end_logits, n_z, reached)
        parts.append(tape.scale(end, cfg.w_end))
    action = action_ce_loss(
        tape,
        out.action_logits,
        np.stack([s.example.tokens for s in samples]),
        np.stack([s.example.token_mask for s in samples]),
    )
    total = tape.scale(action, cfg.w_action)
    for part in parts:
        total = tape.add(total, part)
    return SftTerms(total, latent, end, action)


# ----------------------------- training -----------------------------


def sft_step(params: PolicyParams, cfg: TrainConfig, batch: SftBatch, opt: AdamW, lr: float) -> Dict[str, float]:
    tape = Tape()
    p = LazyParams(tape, params.tensors)
    terms = sft_loss(tape, p, cfg, batch)
    grads, norm = clip_by_global_norm(p.gradients(tape.backward(terms.total)), cfg.grad_clip)
    opt.step(params, grads, lr)

    def scalar(node: Optional[int]) -> Optional[float]:
        return None if node is None else float(np.asarray(tape.value(node)).reshape(()))

    return {
        "loss_total": scalar(terms.total),
        "loss_latent": scalar(terms.latent),
        "loss_end": scalar(terms.end),
        "loss_action": scalar(terms.action),
        "grad_norm": norm,
    }


def train_sft(
    cfg: TrainConfig,
    demos: Sequence[DemoTrajectory],
    cache: LatentCache,
    seed: int,
    writer=None,
    params: Optional[PolicyParams] = None,
) -> PolicyParams:
    """Warm-up from random init (or ``params``); one metrics record per step."""
    if not demos:
        raise ValueError("No demonstrations to train on")
    cache.require(demos, cfg.n_max if cfg.adaptive else cfg.fixed_len)
    writer = writer or NullWriter()
    params = params or init_params(cfg, seed)
    examples = build_examples(demos, cfg)
    rng = np.random.default_rng([seed, 1])
    opt = AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.sft_weight_decay)
    logger.info("SFT: %d examples, %d steps, %d parameters", len(examples), cfg.sft_steps, params.num_parameters())
    for step in range(cfg.sft_steps):
        batch = assemble_batch(examples, cache, cfg, rng, cfg.sft_batch)
        lr = cosine_lr(step, cfg.sft_steps, cfg.sft_lr, cfg.sft_min_lr_ratio)
        stats = sft_step(params, cfg, batch, opt, lr)
        writer.write(
            {
                "step": step,
                "loss_total": stats["loss_total"],
                "loss_latent": stats["loss_latent"],
                "loss_end": stats["loss_end"],
                "loss_action": stats["loss_action"],
                "lr": lr,
            }
        )
        if step % 100 == 0:
            logger.info("sft step %d: loss %.4f (action %.4f)", step, stats["loss_total"], stats["loss_action"])
    return params
