"""Latent-reasoning-before-acting policy network.

Sequence layout, in order::

    prompt (task token + state tokens) | latents | <latent_end> | action placeholders

Prompt, latents and ``<latent_end>`` are causal; action placeholders attend to
everything before them and to each other, and nothing earlier attends to them.

Rollouts run incrementally on a single sample: the prompt is prefilled, each
latent is emitted by the latent head and fed back as the next input, keys and
values are cached per layer and head, and the action placeholders are decoded
in one pass over the cache. Training runs the same network as one masked
batched pass, with recorded latents fed as inputs (teacher forcing).

All activations are rank-3 ``(batch, positions, d_model)``; the incremental
path uses a batch of one.
"""

from __future__ import annotations

import hashlib
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .action_codec import N_BINS, ActionChunk, ActionTokens, detokenize
from .chunkgrid import OBS_DIM
from .errors import ConfigError, ShapeError
from .io.schemas import TrainConfig
from .tape import GradientMap, Tape

logger = logging.getLogger(__name__)

MASK_BIAS = -1e9
MOMENT_SUFFIXES = ("@adam_m", "@adam_v")
STEP_GROUP = "@step"
VALUE_GROUP = "value_head."
# rollouts and their PPO recomputation share float64 tapes so recorded and
# recomputed log-probabilities agree far below the ratio tolerance
RECORD_DTYPE = np.float64


# ----------------------------- parameters -----------------------------


@dataclass
class PolicyParams:
    """Named parameter store plus optimizer moments."""

    tensors: Dict[str, np.ndarray]
    moments: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def copy(self) -> "PolicyParams":
        return PolicyParams(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.moments.items()},
            self.step,
        )

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Read-only copies of the weights, safe to share across rollout workers."""
        frozen = {}
        for name, value in self.tensors.items():
            arr = value.copy()
            arr.setflags(write=False)
            frozen[name] = arr
        return frozen

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            h.update(name.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def to_groups(self) -> Dict[str, np.ndarray]:
        groups = dict(self.tensors)
        groups.update(self.moments)
        groups[STEP_GROUP] = np.array([self.step], dtype=np.float32)
        return groups

    @classmethod
    def from_groups(cls, groups: Dict[str, np.ndarray]) -> "PolicyParams":
        tensors, moments, step = {}, {}, 0
        for name, value in groups.items():
            if name == STEP_GROUP:
                step = int(value.reshape(-1)[0])
            elif name.endswith(MOMENT_SUFFIXES):
                moments[name] = value.astype(np.float32)
            else:
                tensors[name] = value.astype(np.float32)
        return cls(tensors, moments, step)


def _truncated_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return (np.clip(rng.standard_normal(shape), -2.0, 2.0) * std).astype(np.float32)


def init_params(cfg: TrainConfig, seed: int) -> PolicyParams:
    rng = np.random.default_rng(seed)
    d, dh, ph, vh = cfg.d_model, cfg.d_model // cfg.n_heads, cfg.prompt_hidden, cfg.value_hidden
    n_state = cfg.n_prompt - 1

    def w(*shape):
        return _truncated_normal(rng, shape, cfg.init_std)

    def zeros(*shape):
        return np.zeros(shape, dtype=np.float32)

    def ones(*shape):
        return np.ones(shape, dtype=np.float32)

    t: Dict[str, np.ndarray] = {
        "embed.task": w(cfg.n_tasks, d),
        "embed.pos": w(cfg.n_prompt + cfg.n_max + 1, d),
        "embed.end": w(1, d),
        "prompt.task": w(cfg.n_tasks, ph),
        "prompt.w1": w(OBS_DIM, ph),
        "prompt.b1": zeros(ph),
        "prompt.w2": w(ph, n_state * d),
        "prompt.b2": zeros(n_state, d),
        "latent_in.w": w(d, d),
        "latent_in.b": zeros(d),
    }
    for layer in range(cfg.n_layers):
        pre = f"trunk.{layer}"
        t[f"{pre}.ln1.g"], t[f"{pre}.ln1.b"] = ones(d), zeros(d)
        for h in range(cfg.n_heads):
            for kind in "qkv":
                t[f"{pre}.attn.{kind}{h}"] = w(d, dh)
        t[f"{pre}.attn.o"], t[f"{pre}.attn.ob"] = w(d, d), zeros(d)
        t[f"{pre}.ln2.g"], t[f"{pre}.ln2.b"] = ones(d), zeros(d)
        t[f"{pre}.mlp.w1"], t[f"{pre}.mlp.b1"] = w(d, cfg.mlp_ratio * d), zeros(cfg.mlp_ratio * d)
        t[f"{pre}.mlp.w2"], t[f"{pre}.mlp.b2"] = w(cfg.mlp_ratio * d, d), zeros(d)
    t["trunk.ln_f.g"], t["trunk.ln_f.b"] = ones(d), zeros(d)
    t["latent_head.w"], t["latent_head.b"] = w(d, d), zeros(d)
    t["end_head.w"], t["end_head.b"], t["end_head.cont"] = w(1, d), zeros(1), zeros(1)
    t["action_head.w"], t["action_head.b"] = w(d, N_BINS), zeros(N_BINS)
    t["action.placeholders"] = w(cfg.n_tokens, d)
    t["value_head.w1"], t["value_head.b1"] = w(d, vh), zeros(vh)
    t["value_head.w2"], t["value_head.b2"] = w(vh, vh), zeros(vh)
    t["value_head.w3"], t["value_head.b3"] = w(vh, vh), zeros(vh)
    # zero output layer: v_t starts at exactly 0
    t["value_head.w4"], t["value_head.b4"] = zeros(vh, 1), zeros(1)
    return PolicyParams(t)


class LazyParams(Mapping):
    """Binds parameter arrays to tape leaves on first use."""

    def __init__(self, tape: Tape, tensors: Mapping):
        self.tape = tape
        self.tensors = tensors
        self.ids: Dict[str, int] = {}

    def __getitem__(self, name: str) -> int:
        node = self.ids.get(name)
        if node is None:
            node = self.ids[name] = self.tape.leaf(self.tensors[name], name=name)
        return node

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def gradients(self, grads: GradientMap) -> Dict[str, np.ndarray]:
        return {name: grads[node] for name, node in self.ids.items()}


# ----------------------------- masks -----------------------------


@dataclass(frozen=True)
class HybridMask:
    n_prompt: int
    n_latent: int
    n_action: int
    matrix: np.ndarray  # True where row may attend to column

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def build_mask(n_prompt: int, n_latent: int, n_action: int) -> HybridMask:
    if min(n_prompt, n_latent, n_action) < 0:
        raise ValueError("mask counts must be >= 0")
    causal = n_prompt + n_latent + 1
    total = causal + n_action
    m = np.zeros((total, total), dtype=bool)
    m[:causal, :causal] = np.tril(np.ones((causal, causal), dtype=bool))
    m[causal:, :] = True
    return HybridMask(n_prompt, n_latent, n_action, m)


def _bias(allowed: np.ndarray) -> np.ndarray:
    return np.where(allowed, 0.0, MASK_BIAS).astype(np.float32)


def batch_mask(n_prompt: int, n_latent: int, n_action: int, n_used: Sequence[int]) -> np.ndarray:
    """Hybrid mask with each sample's unused latents hidden from <latent_end> and actions.

    Returns ``(T, T)`` when every sample uses all latents, else ``(B, T, T)``.
    """
    base = build_mask(n_prompt, n_latent, n_action).matrix
    n_used = np.asarray(n_used, dtype=np.int64)
    if np.all(n_used == n_latent):
        return base
    allowed = np.repeat(base[None], len(n_used), axis=0)
    tail_rows = n_prompt + n_latent
    for b, used in enumerate(n_used):
        allowed[b, tail_rows:, n_prompt + used : n_prompt + n_latent] = False
    return allowed


# ----------------------------- network pieces -----------------------------


@dataclass
class TrunkState:
    """Per-layer, per-head key/value node ids over the positions seen so far."""

    keys: List[List[int]]
    values: List[List[int]]
    length: int


def _affine(tape: Tape, p: Mapping, x: int, prefix: str, w: str = "w", b: str = "b") -> int:
    return tape.add(tape.matmul(x, p[f"{prefix}.{w}"]), p[f"{prefix}.{b}"])


def _norm(tape: Tape, p: Mapping, x: int, prefix: str) -> int:
    return tape.add(tape.mul(tape.layer_norm(x), p[f"{prefix}.g"]), p[f"{prefix}.b"])


def _block(tape, p, cfg: TrainConfig, layer: int, x: int, cache, bias: Optional[int]):
    pre = f"trunk.{layer}"
    hn = _norm(tape, p, x, f"{pre}.ln1")
    inv_sqrt = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    heads, keys, values = [], [], []
    for h in range(cfg.n_heads):
        q = tape.matmul(hn, p[f"{pre}.attn.q{h}"])
        k = tape.matmul(hn, p[f"{pre}.attn.k{h}"])
        v = tape.matmul(hn, p[f"{pre}.attn.v{h}"])
        if cache is not None:
            k = tape.concat([cache[0][h], k], axis=-2)
            v = tape.concat([cache[1][h], v], axis=-2)
        scores = tape.scale(tape.matmul(q, k, trans_b=True), inv_sqrt)
        if bias is not None:
            scores = tape.add(scores, bias)
        heads.append(tape.matmul(tape.softmax(scores), v))
        keys.append(k)
        values.append(v)
    attended = _affine(tape, p, tape.concat(heads, axis=-1), f"{pre}.attn", "o", "ob")
    x = tape.add(x, attended)
    hidden = tape.gelu(_affine(tape, p, _norm(tape, p, x, f"{pre}.ln2"), f"{pre}.mlp", "w1", "b1"))
    x = tape.add(x, _affine(tape, p, hidden, f"{pre}.mlp", "w2", "b2"))
    return x, keys, values


def _run_rows(tape, p, cfg, x: int, state: Optional[TrunkState], bias: Optional[int]) -> Tuple[int, TrunkState]:
    """Push new rows through the trunk, attending to ``state`` and each other."""
    n_new = tape.shape(x)[-2]
    all_keys, all_values = [], []
    for layer in range(cfg.n_layers):
        cache = (state.keys[layer], state.values[layer]) if state is not None else None
        x, k, v = _block(tape, p, cfg, layer, x, cache, bias)
        all_keys.append(k)
        all_values.append(v)
    length = (state.length if state is not None else 0) + n_new
    return x, TrunkState(all_keys, all_values, length)


def truncate(tape: Tape, state: TrunkState, length: int) -> TrunkState:
    if length == state.length:
        return state
    if not 0 <= length <= state.length:
        raise ValueError(f"cannot truncate {state.length} positions to {length}")
    keep = np.arange(length)
    keys = [[tape.gather_rows(k, keep, axis=-2) for k in layer] for layer in state.keys]
    values = [[tape.gather_rows(v, keep, axis=-2) for v in layer] for layer in state.values]
    return TrunkState(keys, values, length)


def _prompt_rows(tape, p, cfg, obs: np.ndarray, task_ids: np.ndarray) -> int:
    batch = len(task_ids)
    d = cfg.d_model
    hidden = tape.add(tape.matmul(tape.constant(obs), p["prompt.w1"]), p["prompt.b1"])
    hidden = tape.tanh(tape.add(hidden, tape.gather_rows(p["prompt.task"], task_ids)))
    state_tokens = tape.reshape(tape.matmul(hidden, p["prompt.w2"]), (batch, cfg.n_prompt - 1, d))
    state_tokens = tape.add(state_tokens, p["prompt.b2"])
    task_token = tape.reshape(tape.gather_rows(p["embed.task"], task_ids), (batch, 1, d))
    rows = tape.concat([task_token, state_tokens], axis=-2)
    return tape.add(rows, tape.gather_rows(p["embed.pos"], np.arange(cfg.n_prompt)))


def _latent_rows(tape, p, cfg, z: np.ndarray, start: int) -> int:
    """Latent inputs ``z`` (B, n, d) placed at latent positions start..start+n-1."""
    n = z.shape[1]
    x = _affine(tape, p, tape.layer_norm(tape.constant(z)), "latent_in")
    positions = np.arange(cfg.n_prompt + start, cfg.n_prompt + start + n)
    return tape.add(x, tape.gather_rows(p["embed.pos"], positions))


def _end_rows(tape, p, cfg, n_used: np.ndarray) -> int:
    batch = len(n_used)
    pos = tape.gather_rows(p["embed.pos"], cfg.n_prompt + np.asarray(n_used, dtype=np.int64))
    return tape.reshape(tape.add(pos, p["embed.end"]), (batch, 1, cfg.d_model))


def _action_rows(tape, p, cfg, batch: int) -> int:
    base = tape.constant(np.zeros((batch, cfg.n_tokens, cfg.d_model), dtype=np.float32))
    return tape.add(base, p["action.placeholders"])


def _latent_out(tape, p, h: int) -> int:
    return _affine(tape, p, _norm(tape, p, h, "trunk.ln_f"), "latent_head")


def _end_logits(tape, p, h: int) -> int:
    """(B, n, d) hidden rows -> (B, 1, n) end-vs-continue logits."""
    logits = tape.matmul(p["end_head.w"], _norm(tape, p, h, "trunk.ln_f"), trans_b=True)
    return tape.sub(tape.add(logits, p["end_head.b"]), p["end_head.cont"])


def _action_logits(tape, p, h: int) -> int:
    return _affine(tape, p, _norm(tape, p, h, "trunk.ln_f"), "action_head")


def _value(tape, p, h_end: int) -> int:
    """4-layer MLP on the <latent_end> row; returns a (B,) node."""
    x = _norm(tape, p, h_end, "trunk.ln_f")
    for i in (1, 2, 3):
        x = tape.gelu(_affine(tape, p, x, "value_head", f"w{i}", f"b{i}"))
    out = _affine(tape, p, x, "value_head", "w4", "b4")
    return tape.sum(tape.sum(out, axis=-1), axis=-1)


def token_logp(tape: Tape, logits: int, tokens: np.ndarray, temperature: float) -> int:
    """Sum of per-token log-probabilities at ``temperature``; (B, N_a, 256) -> (B,)."""
    tau = temperature if temperature > 0 else 1.0
    logp = tape.log_softmax(tape.scale(logits, 1.0 / tau))
    onehot = np.eye(N_BINS, dtype=np.float32)[np.asarray(tokens, dtype=np.int64)]
    return tape.sum(tape.sum(tape.mul(logp, tape.constant(onehot)), axis=-1), axis=-1)


def end_logp(tape: Tape, end_logits: int, length_index: np.ndarray, beta: float) -> int:
    """log softmax(l / beta)[m] over candidate logits (B, 1, M) -> (B,)."""
    if beta <= 0:
        raise ConfigError("beta must be > 0")
    logp = tape.log_softmax(tape.scale(end_logits, 1.0 / beta))
    m = tape.shape(end_logits)[-1]
    onehot = np.eye(m, dtype=np.float32)[np.asarray(length_index, dtype=np.int64)][:, None, :]
    return tape.sum(tape.sum(tape.mul(logp, tape.constant(onehot)), axis=-1), axis=-1)


# ----------------------------- latent generation -----------------------------


@dataclass(frozen=True)
class LatentMode:
    kind: str  # fixed | sample | exit
    n: int = 0
    beta: float = 1.0
    p_exit: float = 0.99

    def __post_init__(self):
        if self.kind not in ("fixed", "sample", "exit"):
            raise ConfigError(f"unknown latent mode {self.kind!r}")
        if self.kind == "exit" and not 0.0 < self.p_exit <= 1.0:
            raise ConfigError(f"p_exit must be in (0, 1], got {self.p_exit}")
        if self.kind == "sample" and self.beta <= 0:
            raise ConfigError(f"beta must be > 0, got {self.beta}")
        if self.n < 0:
            raise ConfigError("fixed latent count must be >= 0")

    @classmethod
    def fixed(cls, n: int) -> "LatentMode":
        return cls("fixed", n=n)

    @classmethod
    def sample(cls, beta: float) -> "LatentMode":
        return cls("sample", beta=beta)

    @classmethod
    def exit(cls, p_exit: float) -> "LatentMode":
        return cls("exit", p_exit=p_exit)


def rollout_mode(cfg: TrainConfig) -> LatentMode:
    return LatentMode.sample(cfg.beta) if cfg.adaptive else LatentMode.fixed(cfg.fixed_len)


def eval_mode(cfg: TrainConfig) -> LatentMode:
    return LatentMode.exit(cfg.p_exit) if cfg.adaptive else LatentMode.fixed(cfg.fixed_len)


def length_distribution(end_logits: np.ndarray, beta: float) -> np.ndarray:
    scaled = np.asarray(end_logits, dtype=np.float64) / beta
    e = np.exp(scaled - scaled.max())
    return e / e.sum()


def sample_length_index(end_logits: np.ndarray, beta: float, rng: np.random.Generator) -> int:
    probs = length_distribution(end_logits, beta)
    return int(min(np.searchsorted(np.cumsum(probs), rng.random(), side="right"), len(probs) - 1))


@dataclass
class TrunkCache:
    tape: Tape
    params: Mapping
    cfg: TrainConfig
    state: TrunkState
    n_latent: int
    end_hidden: Optional[int] = None


@dataclass
class LatentRollout:
    latents: np.ndarray  # (n_latent, d) used prefix
    tail: np.ndarray  # (n_generated - n_latent, d)
    n_latent: int
    length_index: int  # -1 in fixed mode
    end_logits: np.ndarray  # logits at the candidates reached
    logp_end: float
    cache: TrunkCache


def generate_latents(
    tensors: Mapping,
    cfg: TrainConfig,
    obs: np.ndarray,
    task_id: int,
    mode: LatentMode,
    rng: Optional[np.random.Generator] = None,
) -> LatentRollout:
    tape = Tape(dtype=RECORD_DTYPE)
    p = LazyParams(tape, tensors)
    np_ = cfg.n_prompt
    x = _prompt_rows(tape, p, cfg, np.asarray(obs, dtype=np.float32)[None], np.array([task_id]))
    causal = tape.constant(_bias(np.tril(np.ones((np_, np_), dtype=bool))))
    h, state = _run_rows(tape, p, cfg, x, None, causal)
    last = tape.gather_rows(h, [np_ - 1], axis=-2)

    if mode.kind == "fixed":
        if mode.n > cfg.n_max:
            raise ConfigError(f"fixed latent count {mode.n} exceeds n_max {cfg.n_max}")
        n_gen = mode.n
    else:
        n_gen = cfg.n_max
    candidates = cfg.candidates
    latents: List[np.ndarray] = []
    logit_nodes: List[int] = []
    n_used = n_gen
    for k in range(1, n_gen + 1):
        z = tape.value(_latent_out(tape, p, last))[0, 0].astype(np.float32)
        if cfg.sigma_explore > 0:
            if rng is None:
                raise ValueError("exploration noise needs an rng")
            z = (z + rng.normal(0.0, cfg.sigma_explore, z.shape)).astype(np.float32)
        latents.append(z)
        last, state = _run_rows(tape, p, cfg, _latent_rows(tape, p, cfg, z[None, None], k - 1), state, None)
        if mode.kind != "fixed" and k in candidates:
            logit_nodes.append(_end_logits(tape, p, last))
            if mode.kind == "exit":
                l_k = float(tape.value(logit_nodes[-1]).reshape(()))
                if 1.0 / (1.0 + math.exp(-l_k)) >= mode.p_exit:
                    n_used = k
                    break

    length_index, logp = -1, 0.0
    end_values = np.array([float(tape.value(n).reshape(())) for n in logit_nodes])
    if mode.kind == "sample":
        if rng is None:
            raise ValueError("adaptive sampling needs an rng")
        length_index = sample_length_index(end_values, mode.beta, rng)
        n_used = candidates[length_index]
        stacked = tape.concat(logit_nodes, axis=-1)
        logp = float(tape.value(end_logp(tape, stacked, np.array([length_index]), mode.beta))[0])
    elif mode.kind == "exit":
        length_index = len(logit_nodes) - 1
        logp = float(tape.value(tape.log_sigmoid(logit_nodes[-1])).reshape(()))

    state = truncate(tape, state, np_ + n_used)
    d = cfg.d_model
    all_z = np.stack(latents) if latents else np.zeros((0, d), dtype=np.float32)
    return LatentRollout(
        latents=all_z[:n_used],
        tail=all_z[n_used:],
        n_latent=n_used,
        length_index=length_index,
        end_logits=end_values,
        logp_end=logp,
        cache=TrunkCache(tape, p, cfg, state, n_used),
    )


def _ensure_end(cache: TrunkCache) -> int:
    if cache.end_hidden is None:
        tape, p, cfg = cache.tape, cache.params, cache.cfg
        row = _end_rows(tape, p, cfg, np.array([cache.n_latent]))
        cache.end_hidden, cache.state = _run_rows(tape, p, cfg, row, cache.state, None)
    return cache.end_hidden


def decode_actions(cache: TrunkCache, latents: Optional[np.ndarray] = None) -> int:
    """Action logits node (1, N_a, 256) from one pass over the cached prefix."""
    if latents is not None and len(latents) != cache.n_latent:
        raise ShapeError(f"decode_actions: {len(latents)} latents for a cache holding {cache.n_latent}")
    _ensure_end(cache)
    tape, p, cfg = cache.tape, cache.params, cache.cfg
    h, _ = _run_rows(tape, p, cfg, _action_rows(tape, p, cfg, 1), cache.state, None)
    return _action_logits(tape, p, h)


def value_estimate(cache: TrunkCache) -> int:
    """Value node of shape (1,) read at the <latent_end> position."""
    return _value(cache.tape, cache.params, _ensure_end(cache))


def sample_tokens(logits: np.ndarray, temperature: float, rng: Optional[np.random.Generator]) -> np.ndarray:
    """Independent per-row draws from softmax(logits / temperature); argmax when temperature <= 0."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature <= 0:
        return logits.argmax(axis=-1).astype(np.int64)
    if rng is None:
        raise ValueError("sampling needs an rng")
    scaled = logits / temperature
    probs = np.exp(scaled - scaled.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    u = rng.random(probs.shape[0])
    picks = (np.cumsum(probs, axis=-1) > u[:, None]).argmax(axis=-1)
    return np.minimum(picks, logits.shape[-1] - 1).astype(np.int64)


@dataclass
class Decision:
    latents: np.ndarray
    tail: np.ndarray
    n_latent: int
    length_index: int
    logp_end: float
    tokens: np.ndarray
    logp_actions: float
    value: float
    chunk: ActionChunk


def act(
    tensors: Mapping,
    cfg: TrainConfig,
    obs: np.ndarray,
    task_id: int,
    mode: LatentMode,
    temperature: float,
    rng: Optional[np.random.Generator] = None,
) -> Decision:
    """generate_latents -> decode_actions -> sample tokens -> detokenize."""
    gen = generate_latents(tensors, cfg, obs, task_id, mode, rng)
    cache = gen.cache
    logits = decode_actions(cache, gen.latents)
    value = float(cache.tape.value(value_estimate(cache))[0])
    tokens = sample_tokens(cache.tape.value(logits)[0], temperature, rng)
    logp = float(cache.tape.value(token_logp(cache.tape, logits, tokens[None], temperature))[0])
    chunk = detokenize(ActionTokens(tokens, cfg.horizon, cfg.action_dim))
    return Decision(gen.latents, gen.tail, gen.n_latent, gen.length_index, gen.logp_end, tokens, logp, value, chunk)


# ----------------------------- batched teacher-forced pass -----------------------------


@dataclass
class JointOutputs:
    latent_preds: Optional[int]  # (B, N, d): prediction for latent k at index k-1
    end_logits: Optional[int]  # (B, 1, M') at candidates <= N
    action_logits: int  # (B, N_a, 256)
    value: int  # (B,)


def forward_batch(
    tape: Tape,
    p: Mapping,
    cfg: TrainConfig,
    observations: np.ndarray,
    task_ids: np.ndarray,
    latents: np.ndarray,
    n_used: np.ndarray,
) -> JointOutputs:
    """One uncached pass over [prompt | latents | <latent_end> | actions].

    ``latents`` (B, N, d) are fed as inputs; sample b's <latent_end> and action
    rows see only its first ``n_used[b]`` of them.
    """
    observations = np.asarray(observations, dtype=np.float32)
    task_ids = np.asarray(task_ids, dtype=np.int64)
    n_used = np.asarray(n_used, dtype=np.int64)
    batch, n_lat = latents.shape[0], latents.shape[1]
    if observations.shape != (batch, OBS_DIM) or task_ids.shape != (batch,) or n_used.shape != (batch,):
        raise ShapeError(
            f"forward_batch: observations {observations.shape}, task ids {task_ids.shape}, "
            f"lengths {n_used.shape} for {batch} samples"
        )
    if n_lat > cfg.n_max or np.any(n_used > n_lat) or np.any(n_used < 0):
        raise ShapeError(f"forward_batch: latent lengths {n_used.tolist()} invalid for {n_lat} inputs")
    np_ = cfg.n_prompt
    parts = [_prompt_rows(tape, p, cfg, observations, task_ids)]
    if n_lat:
        parts.append(_latent_rows(tape, p, cfg, np.asarray(latents, dtype=np.float32), 0))
    parts.append(_end_rows(tape, p, cfg, n_used))
    parts.append(_action_rows(tape, p, cfg, batch))
    x = tape.concat(parts, axis=-2)
    bias = tape.constant(_bias(batch_mask(np_, n_lat, cfg.n_tokens, n_used)))
    h, _ = _run_rows(tape, p, cfg, x, None, bias)

    preds = None
    if n_lat:
        preds = _latent_out(tape, p, tape.gather_rows(h, np.arange(np_ - 1, np_ - 1 + n_lat), axis=-2))
    reached = [c for c in cfg.candidates if c <= n_lat]
    end = None
    if reached:
        end = _end_logits(tape, p, tape.gather_rows(h, [np_ + c - 1 for c in reached], axis=-2))
    value = _value(tape, p, tape.gather_rows(h, [np_ + n_lat], axis=-2))
    start = np_ + n_lat + 1
    actions = _action_logits(tape, p, tape.gather_rows(h, np.arange(start, start + cfg.n_tokens), axis=-2))
    return JointOutputs(preds, end, actions, value)


@dataclass
class JointForward:
    z_theta: Optional[int]  # (B, N, d)
    latent_mask: np.ndarray  # (B, N, 1) 1 for used latents
    logp_actions: int  # (B,)
    logp_end: Optional[int]  # (B,) adaptive mode only
    value: int  # (B,)


def forward_joint(
    tape: Tape,
    p: Mapping,
    cfg: TrainConfig,
    observations: np.ndarray,
    task_ids: np.ndarray,
    z_full: np.ndarray,
    n_used: np.ndarray,
    tokens: np.ndarray,
    length_index: np.ndarray,
) -> JointForward:
    """Teacher-forced recomputation of recorded rollout steps under the current weights.

    ``z_full`` holds the used latents followed by the generated tail, so the
    length distribution can be evaluated over every candidate.
    """
    z_full = np.asarray(z_full, dtype=np.float32)
    tokens = np.asarray(tokens, dtype=np.int64)
    expected = cfg.n_max if cfg.adaptive else cfg.fixed_len
    if z_full.ndim != 3 or z_full.shape[1] != expected or z_full.shape[2] != cfg.d_model:
        raise ShapeError(f"forward_joint: latents {z_full.shape} do not match {expected} x {cfg.d_model}")
    if tokens.shape != (z_full.shape[0], cfg.n_tokens):
        raise ShapeError(f"forward_joint: tokens {tokens.shape} do not match {cfg.n_tokens} per step")
    out = forward_batch(tape, p, cfg, observations, task_ids, z_full, n_used)
    logp_a = token_logp(tape, out.action_logits, tokens, cfg.temperature)
    logp_end = None
    if cfg.adaptive:
        logp_end = end_logp(tape, out.end_logits, length_index, cfg.beta)
    mask = (np.arange(z_full.shape[1])[None, :] < np.asarray(n_used)[:, None]).astype(np.float32)[..., None]
    return JointForward(out.latent_preds, mask, logp_a, logp_end, out.value)
