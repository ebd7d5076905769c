"""AdamW, cosine learning-rate decay and global-norm clipping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from .policy import PolicyParams

logger = logging.getLogger(__name__)


def cosine_lr(step: int, total: int, peak: float, min_ratio: float = 0.1) -> float:
    """Cosine decay from ``peak`` at step 0 to ``min_ratio * peak`` at ``total``."""
    if total <= 0:
        return peak
    progress = min(max(step / total, 0.0), 1.0)
    floor = min_ratio * peak
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads: Dict[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_by_global_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """Returns (clipped grads, norm before clipping)."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    factor = max_norm / (norm + 1e-12)
    return {k: (g.astype(np.float64) * factor).astype(np.float32) for k, g in grads.items()}, norm


@dataclass
class AdamW:
    """Adam with decoupled weight decay; decay skips rank-1 tensors (biases, norms).

    ``lr_scale`` maps a parameter-name prefix to a learning-rate multiplier.
    """

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_scale: Dict[str, float] = field(default_factory=dict)

    def _scale_for(self, name: str) -> float:
        for prefix, mult in self.lr_scale.items():
            if name.startswith(prefix):
                return mult
        return 1.0

    def step(self, params: PolicyParams, grads: Dict[str, np.ndarray], lr: float) -> None:
        params.step += 1
        t = params.step
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name in sorted(params.tensors):
            value = params.tensors[name]
            g = grads.get(name)
            g = np.zeros(value.shape, dtype=np.float64) if g is None else g.astype(np.float64)
            m_key, v_key = name + "@adam_m", name + "@adam_v"
            m = params.moments.get(m_key)
            v = params.moments.get(v_key)
            m = np.zeros(value.shape) if m is None else m.astype(np.float64)
            v = np.zeros(value.shape) if v is None else v.astype(np.float64)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            rate = lr * self._scale_for(name)
            w = value.astype(np.float64)
            if self.weight_decay and value.ndim > 1:
                w = w - rate * self.weight_decay * w
            w = w - rate * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            params.tensors[name] = w.astype(np.float32)
            params.moments[m_key] = m.astype(np.float32)
            params.moments[v_key] = v.astype(np.float32)

    @staticmethod
    def reset(params: PolicyParams) -> None:
        params.moments.clear()
        params.step = 0
