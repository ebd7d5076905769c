"""Validated configuration records.

Desk-scale defaults differ from the large-model recipe in three places:
peak SFT learning rate 1e-3 (vs 1e-5 for a 4B backbone), actor learning rate
3e-4 (vs 3e-5) and a rollout batch of 64 trajectories (vs 512).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..chunkgrid import SUCCESS_REWARD, SUITES
from ..errors import ConfigError


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # architecture
    d_model: int = Field(64, gt=0)
    n_layers: int = Field(2, gt=0)
    n_heads: int = Field(2, gt=0)
    n_prompt: int = Field(4, ge=2, description="prompt tokens: one task token plus state tokens")
    prompt_hidden: int = Field(64, gt=0)
    value_hidden: int = Field(64, gt=0)
    mlp_ratio: int = Field(4, gt=0)
    init_std: float = Field(0.02, gt=0)

    # environment and action chunking
    horizon: int = Field(8, gt=0)
    action_dim: int = Field(3, ge=3)
    grid_size: int = Field(8, ge=3)
    n_variants: int = Field(10, gt=0)

    # latent reasoning
    latent_mode: Literal["adaptive", "fixed"] = "adaptive"
    fixed_len: int = Field(8, ge=0)
    n_max: int = Field(8, gt=0)
    n_candidates: int = Field(4, gt=0, description="M, candidate exit positions")
    beta: float = Field(1.0, gt=0)
    p_exit: float = 0.99
    sigma: float = 1.0
    sigma_explore: float = Field(0.0, ge=0)
    teacher_seed: int = 0
    teacher_dim: int = Field(256, gt=0)
    topk: int = Field(64, gt=0)
    latent_stride: int = Field(1, gt=0, description="micro-steps between consecutive future targets")

    # RL
    gamma: float = 0.99
    gae_lambda: float = Field(0.95, ge=0, le=1)
    eps_min: float = 0.2
    eps_max: float = 0.28
    lambda1: float = Field(0.1, ge=0)
    lambda2: float = Field(1.0, ge=0)
    lambda3: float = Field(0.1, ge=0)
    temperature: float = Field(1.6, ge=0)
    rollout_batch: int = Field(64, gt=0)
    minibatches: int = Field(4, gt=0)
    epochs: int = Field(4, gt=0)
    actor_lr: float = Field(3e-4, gt=0)
    value_lr_mult: float = Field(10.0, gt=0)
    grad_clip: float = Field(10.0, gt=0)
    rl_weight_decay: float = Field(0.0, ge=0)
    normalize_advantages: bool = True
    success_reward: float = Field(SUCCESS_REWARD, ge=0, description="terminal reward on success; 0 ablates the reward")
    updates: int = Field(200, ge=0)
    eval_every: int = Field(5, gt=0)
    eval_rollouts: int = Field(10, gt=0)
    rollout_workers: int = Field(1, gt=0)

    # SFT
    sft_steps: int = Field(1500, ge=0)
    sft_batch: int = Field(32, gt=0)
    sft_lr: float = Field(1e-3, gt=0)
    sft_min_lr_ratio: float = Field(0.1, ge=0, le=1)
    sft_weight_decay: float = Field(0.01, ge=0)
    w_latent: float = Field(1.0, ge=0)
    w_end: float = Field(0.1, ge=0)
    w_action: float = Field(1.0, ge=0)

    # optimizer
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.999, ge=0, lt=1)
    adam_eps: float = Field(1e-8, gt=0)

    @field_validator("gamma")
    @classmethod
    def _gamma_open_interval(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        return v

    @field_validator("eps_min", "eps_max", "sigma")
    @classmethod
    def _positive(cls, v: float) -> float:
        if v <= 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("p_exit")
    @classmethod
    def _p_exit_range(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError("p_exit must be in (0, 1]")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "TrainConfig":
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.n_max % self.n_candidates:
            raise ValueError(f"n_max {self.n_max} is not divisible by n_candidates {self.n_candidates}")
        if self.topk != self.d_model:
            raise ValueError("topk must equal d_model")
        if self.topk > self.teacher_dim:
            raise ValueError("topk cannot exceed teacher_dim")
        if self.fixed_len > self.n_max:
            raise ValueError(f"fixed_len {self.fixed_len} exceeds n_max {self.n_max}")
        return self

    @property
    def candidates(self) -> List[int]:
        step = self.n_max // self.n_candidates
        return [step * i for i in range(1, self.n_candidates + 1)]

    @property
    def n_tokens(self) -> int:
        return self.horizon * self.action_dim

    @property
    def n_tasks(self) -> int:
        return len(SUITES) * self.n_variants

    @property
    def adaptive(self) -> bool:
        return self.latent_mode == "adaptive"

    def digest(self) -> str:
        payload = json.dumps(self.model_dump(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    demos: Path = Path("demos.bin")
    cache: Path = Path("latents.bin")
    checkpoints: Path = Path("checkpoints")
    metrics: Path = Path("metrics")
    rollouts: Path = Path("rollouts")

    def resolved(self, root: Path) -> "PathsConfig":
        return PathsConfig(**{name: Path(root) / value for name, value in self})


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train: TrainConfig = Field(default_factory=TrainConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    suites: List[str] = Field(default_factory=lambda: ["reach"])
    holdout_variant: Optional[int] = None
    seeds: List[int] = Field(default_factory=lambda: [0])
    demos_per_task: int = Field(1, gt=0)

    @field_validator("suites")
    @classmethod
    def _known_suites(cls, v: List[str]) -> List[str]:
        if v == ["all"]:
            return list(SUITES)
        unknown = [s for s in v if s not in SUITES]
        if unknown or not v:
            raise ValueError(f"unknown suites {unknown}; choose from {list(SUITES)} or all")
        return v

    @model_validator(mode="after")
    def _holdout_in_range(self) -> "ExperimentConfig":
        if self.holdout_variant is not None and not 0 <= self.holdout_variant < self.train.n_variants:
            raise ValueError(f"holdout_variant must be in [0, {self.train.n_variants})")
        return self

    def with_train(self, **updates) -> "ExperimentConfig":
        """Copy with TrainConfig fields replaced, re-validated."""
        merged = {**self.train.model_dump(), **updates}
        return self.model_copy(update={"train": _validated(TrainConfig, merged)})


def _first_error(exc: ValidationError) -> str:
    err = exc.errors()[0]
    where = ".".join(str(p) for p in err.get("loc", ())) or "config"
    return f"{where}: {err.get('msg', 'invalid value')}"


def _validated(model, data):
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(_first_error(e)) from None


def load_experiment(path: Optional[Path] = None) -> ExperimentConfig:
    """Read a YAML experiment file; no path means all defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return _validated(ExperimentConfig, data)


def parse_latent_mode(text: str) -> Dict[str, object]:
    """``fixed:N`` or ``adaptive`` as TrainConfig updates."""
    if text == "adaptive":
        return {"latent_mode": "adaptive"}
    kind, _, value = text.partition(":")
    if kind == "fixed" and value.isdigit():
        return {"latent_mode": "fixed", "fixed_len": int(value)}
    raise ConfigError(f"latent mode must be fixed:N or adaptive, got {text!r}")


BASELINES = ("lapo", "ppo-action-only")
GRID_ALIASES = {"n_z": "fixed_len", "nz": "fixed_len", "m": "n_candidates"}


def baseline_updates(name: str) -> Dict[str, object]:
    """TrainConfig updates for a named baseline; the action-only PPO baseline
    drops latent reasoning and both latent loss terms."""
    if name == "lapo":
        return {}
    if name == "ppo-action-only":
        return {"latent_mode": "fixed", "fixed_len": 0, "lambda1": 0.0, "lambda3": 0.0}
    raise ConfigError(f"unknown baseline {name!r}; choose from {list(BASELINES)}")


def parse_grid(specs: List[str]) -> Dict[str, List[object]]:
    """``key=v1,v2`` sweep specs -> {key: [values]} with YAML scalar typing."""
    grid: Dict[str, List[object]] = {}
    known = set(TrainConfig.model_fields)
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = GRID_ALIASES.get(key.strip().lower(), key.strip())
        if not sep or not values:
            raise ConfigError(f"grid spec must look like key=v1,v2, got {spec!r}")
        if key not in known:
            raise ConfigError(f"unknown grid key {key!r}")
        grid[key] = [yaml.safe_load(v.strip()) for v in values.split(",")]
    return grid
