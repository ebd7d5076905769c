"""Continuous action chunks <-> 256-bin action tokens.

Tokens are laid out step-major: token ``h * A + a`` encodes component ``a`` of
micro-step ``h``. Every component, gripper included, uses the same uniform
binning over [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CodecError

N_BINS = 256


@dataclass(frozen=True)
class ActionChunk:
    """H micro-step control vectors of A components each, all in [-1, 1]."""

    steps: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.steps, dtype=np.float64)
        if raw.ndim != 2:
            raise CodecError(f"ActionChunk needs shape (H, A), got {raw.shape}")
        # checked at input precision; the float32 cast rounds 1 + 1e-9 down to 1
        if not np.all(np.isfinite(raw)) or np.any(raw < -1.0) or np.any(raw > 1.0):
            raise CodecError("action component outside [-1, 1]")
        object.__setattr__(self, "steps", raw.astype(np.float32))

    @property
    def horizon(self) -> int:
        return self.steps.shape[0]

    @property
    def action_dim(self) -> int:
        return self.steps.shape[1]


@dataclass(frozen=True)
class ActionTokens:
    tokens: np.ndarray
    horizon: int
    action_dim: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens)
        if tokens.shape != (self.horizon * self.action_dim,):
            raise CodecError(
                f"expected {self.horizon * self.action_dim} tokens, got shape {tokens.shape}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= N_BINS):
            raise CodecError(f"token outside [0, {N_BINS - 1}]")
        object.__setattr__(self, "tokens", tokens.astype(np.int64))


def tokenize(chunk: ActionChunk) -> ActionTokens:
    a = chunk.steps.astype(np.float64)
    bins = np.clip(np.floor((a + 1.0) / 2.0 * N_BINS), 0, N_BINS - 1).astype(np.int64)
    return ActionTokens(bins.reshape(-1), chunk.horizon, chunk.action_dim)


def detokenize(tokens: ActionTokens) -> ActionChunk:
    centers = -1.0 + (2.0 * tokens.tokens.astype(np.float64) + 1.0) / N_BINS
    return ActionChunk(centers.reshape(tokens.horizon, tokens.action_dim))
