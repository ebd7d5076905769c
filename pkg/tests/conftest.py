"""Pytest configuration shared by the lapo_lab tests.

Points LAPO_LAB_DIR at a scratch directory BEFORE any lapo_lab module reads it,
so CLI tests never write into a real output root, and supplies a tiny network
configuration that keeps every forward pass in the millisecond range.
"""

import os
from pathlib import Path

import pytest

TEST_OUTPUT_ROOT = Path("lapo_lab_test_runs").absolute()
os.environ.setdefault("LAPO_LAB_DIR", str(TEST_OUTPUT_ROOT))

from lapo_lab.io.schemas import TrainConfig  # noqa: E402

SMALL = dict(
    d_model=16,
    n_heads=2,
    n_layers=1,
    topk=16,
    teacher_dim=32,
    prompt_hidden=16,
    value_hidden=16,
    n_variants=3,
    sft_batch=4,
    rollout_batch=4,
    minibatches=2,
    epochs=1,
    eval_rollouts=1,
)


def small_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**SMALL, **overrides})


@pytest.fixture
def cfg() -> TrainConfig:
    return small_config()


@pytest.fixture
def output_root(tmp_path, monkeypatch) -> Path:
    monkeypatch.setenv("LAPO_LAB_DIR", str(tmp_path))
    return tmp_path
