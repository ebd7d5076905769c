"""lapo_lab package initialization.

Public API surface:
 - Tape, finite_diff_check: reverse-mode autodiff over numpy arrays
 - tokenize, detokenize: 256-bin action codec
 - ChunkGridEnv, TaskSpec, scripted_expert: action-chunk gridworld and its expert
 - FeatureTeacher, LatentCache, topk_select: precomputed latent reasoning targets
 - init_params, act, forward_joint: the latent-reasoning policy
 - train_sft, train_rl, eval_policy: warm-up, online RL and greedy evaluation

Everything else is internal.
"""

__version__ = "0.1.0"

from .action_codec import detokenize, tokenize
from .chunkgrid import ChunkGridEnv, TaskSpec, scripted_expert
from .evaluation import eval_policy
from .lapo import train_rl
from .latent_oracle import FeatureTeacher, LatentCache, topk_select
from .policy import act, forward_joint, init_params
from .sft import train_sft
from .tape import Tape, finite_diff_check

__all__ = [
    "Tape",
    "finite_diff_check",
    "tokenize",
    "detokenize",
    "ChunkGridEnv",
    "TaskSpec",
    "scripted_expert",
    "FeatureTeacher",
    "LatentCache",
    "topk_select",
    "init_params",
    "act",
    "forward_joint",
    "train_sft",
    "train_rl",
    "eval_policy",
]
