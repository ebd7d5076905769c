from dataclasses import replace

import numpy as np
import pytest

from lapo_lab.chunkgrid import (
    OBS_DIM,
    SUITES,
    TaskSpec,
    encode_observation,
    initial_state,
    micro_states,
    scripted_expert,
)
from lapo_lab.errors import CacheError
from lapo_lab.latent_oracle import FeatureTeacher, LatentCache, build_cache_records, future_targets, topk_select


def _make_demos(n=2):
    return [scripted_expert(TaskSpec("pickplace", v), seed=v, horizon=4) for v in range(n)]


def _brute_topk(v, k):
    ranked = sorted(range(len(v)), key=lambda i: (-abs(v[i]), i))
    return np.array([v[i] for i in sorted(ranked[:k])])


def test_topk_keeps_original_order():
    assert list(topk_select(np.array([3.0, -1.0, 2.0]), 2)) == [3.0, 2.0]
    assert list(topk_select(np.array([0.1, -0.9, 0.5, 0.9]), 2)) == [-0.9, 0.9]


def test_topk_ties_go_to_lower_index():
    rng = np.random.default_rng(0)
    for _ in range(50):
        v = rng.integers(-3, 4, size=12).astype(np.float64)
        k = int(rng.integers(1, 13))
        assert np.array_equal(topk_select(v, k), _brute_topk(v, k)), f"mismatch for {v} k={k}"


def test_topk_matches_brute_force_on_wide_vectors():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        v = rng.integers(-5, 6, size=64).astype(np.float32) / 4.0
        k = int(rng.integers(1, 65))
        assert np.array_equal(topk_select(v, k), _brute_topk(v, k)), f"mismatch for k={k}"


def test_topk_rejects_bad_k():
    with pytest.raises(ValueError):
        topk_select(np.ones(4), 0)
    with pytest.raises(ValueError):
        topk_select(np.ones(4), 5)


def test_teacher_maps_zero_state_to_zero():
    teacher = FeatureTeacher(seed=3, dim=32, hidden=16)
    feats = teacher.features_from_obs(np.zeros(OBS_DIM))
    assert feats.shape == (32,)
    assert np.all(feats == 0.0)
    assert np.all(topk_select(feats, 8) == 0.0)


def test_teacher_is_deterministic_per_seed():
    obs = np.linspace(-1.0, 1.0, OBS_DIM)
    a = FeatureTeacher(seed=1, dim=16, hidden=8).features_from_obs(obs)
    b = FeatureTeacher(seed=1, dim=16, hidden=8).features_from_obs(obs)
    c = FeatureTeacher(seed=2, dim=16, hidden=8).features_from_obs(obs)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def _random_state(rng, grid_size=8):
    task = TaskSpec(SUITES[int(rng.integers(len(SUITES)))], int(rng.integers(10)), grid_size=grid_size)
    state = initial_state(task, int(rng.integers(1000)))
    agent = (int(rng.integers(grid_size)), int(rng.integers(grid_size)))
    return replace(state, agent=agent, gripper=bool(rng.integers(2)))


def test_distinct_states_get_distinct_targets():
    teacher = FeatureTeacher(seed=0)
    rng = np.random.default_rng(3)
    pairs = collisions = 0
    while pairs < 1000:
        a, b = _random_state(rng), _random_state(rng)
        if np.array_equal(encode_observation(a), encode_observation(b)):
            continue
        pairs += 1
        if np.array_equal(topk_select(teacher.features(a), 64), topk_select(teacher.features(b), 64)):
            collisions += 1
    assert collisions / pairs == 0.0


def test_future_targets_match_replayed_states():
    demo = _make_demos(1)[0]
    teacher = FeatureTeacher(seed=0, dim=32, hidden=16)
    states, counts = micro_states(demo)
    t = 1
    targets = future_targets(demo, t, 3, teacher, k=8, stride=2)
    start = int(counts[:t].sum())
    for j, target in enumerate(targets, start=1):
        state = states[min(start + 2 * j, len(states) - 1)]
        assert np.array_equal(target.vector, topk_select(teacher.features(state), 8))
        assert target.source == (0, t, j)


def test_future_targets_clamp_to_final_state():
    demo = _make_demos(1)[0]
    teacher = FeatureTeacher(seed=0, dim=32, hidden=16)
    states, _ = micro_states(demo)
    targets = future_targets(demo, demo.n_steps - 1, 4, teacher, k=8, stride=100)
    final = topk_select(teacher.features(states[-1]), 8)
    for target in targets:
        assert np.array_equal(target.vector, final)


def test_future_targets_reject_bad_step():
    demo = _make_demos(1)[0]
    with pytest.raises(IndexError):
        future_targets(demo, demo.n_steps, 1, FeatureTeacher(dim=8, hidden=8), k=4)


def test_cache_records_are_sorted_and_complete():
    demos = _make_demos(2)
    teacher = FeatureTeacher(seed=0, dim=32, hidden=16)
    records = build_cache_records(demos, teacher, k=8, n_max=3)
    keys = [key for key, _ in records]
    assert keys == sorted(keys)
    assert len(keys) == sum(d.n_steps for d in demos) * 3
    threaded = build_cache_records(demos, teacher, k=8, n_max=3, workers=2)
    assert [key for key, _ in threaded] == keys
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(records, threaded))


def test_cache_lookup_and_require():
    demos = _make_demos(2)
    cache = LatentCache(build_cache_records(demos, FeatureTeacher(dim=16, hidden=8), k=4, n_max=2))
    assert cache.dim == 4
    assert cache.targets(0, 0, 2).shape == (2, 4)
    assert cache.targets(0, 0, 0).shape == (0, 4)
    cache.require(demos, 2)
    with pytest.raises(CacheError):
        cache.require(demos, 3)
    with pytest.raises(CacheError):
        cache.lookup(5, 0, 1)
