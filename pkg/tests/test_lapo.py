import math

import numpy as np
import pytest

from conftest import small_config
from lapo_lab import lapo
from lapo_lab.errors import ConfigError, NumericAbort, NumericError
from lapo_lab.io.formats import read_checkpoint, read_rollouts
from lapo_lab.io.metrics import MetricsWriter, read_metrics
from lapo_lab.io.schemas import ExperimentConfig
from lapo_lab.lapo import (
    RATIO_EXP_BOUND,
    StepBatch,
    clipped_surrogate,
    collect_rollouts,
    compute_gae,
    gae_arrays,
    holdout_protocol,
    normalize_advantages,
    padding_step,
    ratio_action,
    ratio_end,
    ratio_identity_gap,
    ratio_latent,
    success_gain,
    total_loss,
    train_rl,
)
from lapo_lab.optim import AdamW, clip_by_global_norm, global_norm
from lapo_lab.policy import RECORD_DTYPE, LazyParams, PolicyParams, forward_joint, init_params, rollout_mode
from lapo_lab.tape import Tape, finite_diff_check


def _make_split(cfg, holdout=2):
    return holdout_protocol(ExperimentConfig(train=cfg, holdout_variant=holdout))


def _make_buffer(cfg, seed=0, n_traj=3, workers=1):
    params = init_params(cfg, seed=seed)
    split = _make_split(cfg)
    buffer = collect_rollouts(params.snapshot(), cfg, split.seen, n_traj, rollout_mode(cfg), seed, workers=workers)
    return params, buffer


def _randomize_value_head(params, seed=0):
    rng = np.random.default_rng(seed)
    for name, value in params.tensors.items():
        if name.startswith("value_head."):
            params.tensors[name] = value + rng.normal(0.0, 0.2, value.shape).astype(np.float32)
    return params


def _brute_gae(rewards, values, gamma, lam):
    n = len(rewards)
    deltas = [rewards[t] + gamma * (values[t + 1] if t + 1 < n else 0.0) - values[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** l * deltas[t + l] for l in range(n - t)) for t in range(n)])


# ----------------------------- GAE -----------------------------


def test_gae_undiscounted_counts_remaining_reward():
    adv, returns = gae_arrays([[1, 1, 1]], [[0, 0, 0]], [[0, 0, 1]], [[True] * 3], gamma=1.0, lam=1.0)
    assert np.allclose(adv[0], [3, 2, 1])
    assert np.allclose(returns[0], [3, 2, 1])


def test_gae_lambda_zero_is_one_step_td():
    adv, _ = gae_arrays([[0, 0, 5]], [[1, 2, 3]], [[0, 0, 1]], [[True] * 3], gamma=0.9, lam=0.0)
    assert np.allclose(adv[0], [0.8, 0.7, 2.0])


def test_gae_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = 20
        rewards, values = rng.normal(size=n), rng.normal(size=n)
        dones = np.zeros(n)
        dones[-1] = 1.0
        adv, _ = gae_arrays(rewards[None], values[None], dones[None], np.ones((1, n), bool), gamma=0.97, lam=0.9)
        assert np.max(np.abs(adv[0] - _brute_gae(rewards, values, 0.97, 0.9))) < 1e-6


def test_truncated_trajectory_bootstraps_zero():
    adv, _ = gae_arrays([[0.0, 0.0]], [[1.0, 1.0]], [[0, 0]], [[True, True]], gamma=0.5, lam=1.0)
    assert adv[0, 1] == pytest.approx(-1.0)
    assert adv[0, 0] == pytest.approx(0.5 * 1.0 - 1.0 + 0.5 * -1.0)


def test_padding_does_not_change_advantages():
    rewards = [[0.0, 5.0, 0.0, 0.0], [0.0, 0.0, 0.0, 5.0]]
    values = [[0.3, 0.1, 9.0, 9.0], [0.2, 0.4, 0.1, 0.6]]
    dones = [[0, 1, 1, 1], [0, 0, 0, 1]]
    valid = [[True, True, False, False], [True] * 4]
    adv, returns = gae_arrays(rewards, values, dones, valid, gamma=0.99, lam=0.95)
    alone, _ = gae_arrays([[0.0, 5.0]], [[0.3, 0.1]], [[0, 1]], [[True, True]], gamma=0.99, lam=0.95)
    assert np.allclose(adv[0, :2], alone[0])
    assert np.all(adv[0, 2:] == 0.0) and np.all(returns[0, 2:] == 0.0)


def test_advantage_normalization_uses_valid_steps():
    adv = np.array([[1.0, 2.0, 100.0], [3.0, 4.0, -50.0]])
    valid = np.array([[True, True, False], [True, True, False]])
    out = normalize_advantages(adv, valid)
    assert out[valid].mean() == pytest.approx(0.0, abs=1e-9)
    assert out[valid].std() == pytest.approx(1.0, abs=1e-6)
    assert np.all(out[~valid] == 0.0)


# ----------------------------- ratios -----------------------------


def test_action_ratio_values():
    tape = Tape(dtype=np.float64)
    new = tape.leaf(np.array([math.log(2.0), math.log(3.0), 50.0]))
    term = ratio_action(tape, new, np.zeros(3))
    assert np.allclose(tape.value(term.node), [2.0, 3.0, math.exp(RATIO_EXP_BOUND)])
    assert list(term.clamped) == [False, False, True]


def test_latent_ratio_and_gradient_direction():
    tape = Tape(dtype=np.float64)
    z_theta = tape.leaf(np.zeros((1, 1, 2)))
    z_old = np.ones((1, 1, 2))
    term = ratio_latent(tape, z_old, z_theta, sigma=1.0)
    assert tape.value(term.node)[0] == pytest.approx(math.exp(-1.0))
    grad = tape.backward(tape.sum(term.node))[z_theta]
    assert np.all(grad > 0), "raising r_z moves z_theta toward the recorded latent"
    assert np.allclose(grad, math.exp(-1.0))


def test_latent_ratio_respects_mask_and_sigma():
    tape = Tape(dtype=np.float64)
    z_theta = tape.leaf(np.zeros((1, 2, 2)))
    z_old = np.array([[[0.0, 0.0], [10.0, 10.0]]])
    term = ratio_latent(tape, z_old, z_theta, sigma=1.0, mask=np.array([[[1.0], [0.0]]]))
    assert tape.value(term.node)[0] == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        ratio_latent(tape, z_old, z_theta, sigma=0.0)


@pytest.mark.parametrize(
    "ratio, adv, expected",
    [(1.0, 2.0, -2.0), (2.0, 1.5, -1.28 * 1.5), (0.5, -2.0, -0.8 * -2.0), (0.5, 2.0, -0.5 * 2.0)],
)
def test_clipped_surrogate(ratio, adv, expected):
    tape = Tape(dtype=np.float64)
    loss = clipped_surrogate(tape, tape.leaf(np.array([ratio])), np.array([adv]), 0.2, 0.28)
    assert tape.value(loss)[0] == pytest.approx(expected)


def test_clipped_region_has_no_gradient():
    tape = Tape(dtype=np.float64)
    r = tape.leaf(np.array([2.0]))
    loss = clipped_surrogate(tape, r, np.array([1.0]), 0.2, 0.28)
    assert tape.backward(tape.sum(loss))[r][0] == 0.0


def test_gradient_clipping_bounds_norm():
    grads = {"a": np.full((3, 3), 100.0, dtype=np.float32), "b": np.ones(4, dtype=np.float32)}
    clipped, before = clip_by_global_norm(grads, 10.0)
    assert before > 10.0
    assert global_norm(clipped) <= 10.0 + 1e-4
    small = {"a": np.full(2, 0.1, dtype=np.float32)}
    assert clip_by_global_norm(small, 10.0)[0] is small


# ----------------------------- rollouts and loss -----------------------------


def test_total_loss_needs_valid_steps(cfg):
    _, buffer = _make_buffer(cfg, n_traj=1)
    pad = [padding_step(buffer.trajectories[0].steps[0])]
    tape = Tape()
    params = init_params(cfg, seed=0)
    with pytest.raises(ValueError):
        total_loss(tape, LazyParams(tape, params.tensors), cfg, pad, np.zeros(1), np.zeros(1))


def test_first_epoch_ratios_are_one(cfg):
    params, buffer = _make_buffer(cfg)
    gap = ratio_identity_gap(params.tensors, cfg, buffer.valid_steps())
    assert gap <= 1e-5, f"ratios deviate from 1 by {gap}"


def test_first_epoch_ratios_are_one_in_fixed_mode():
    cfg = small_config(latent_mode="fixed", fixed_len=3)
    params, buffer = _make_buffer(cfg)
    assert ratio_identity_gap(params.tensors, cfg, buffer.valid_steps()) <= 1e-5


def test_rollouts_do_not_depend_on_worker_count(cfg):
    _, serial = _make_buffer(cfg, n_traj=4, workers=1)
    _, threaded = _make_buffer(cfg, n_traj=4, workers=3)
    for a, b in zip(serial.trajectories, threaded.trajectories):
        assert a.task == b.task
        assert [s.tokens.tolist() for s in a.steps] == [s.tokens.tolist() for s in b.steps]
        assert [s.logp_a_old for s in a.steps] == [s.logp_a_old for s in b.steps]


def test_rollouts_never_visit_the_holdout_variant(cfg):
    split = _make_split(cfg, holdout=2)
    assert [t.variant for t in split.holdout] == [2]
    _, buffer = _make_buffer(cfg, n_traj=6)
    assert all(traj.task.variant != 2 for traj in buffer.trajectories)


def test_holdout_leaving_no_tasks_is_rejected():
    cfg = small_config(n_variants=1)
    with pytest.raises(ConfigError):
        _make_split(cfg, holdout=0)


def test_rl_smoke_run_writes_metrics(tmp_path):
    cfg = small_config(updates=2, eval_every=1, rollout_batch=2)
    split = _make_split(cfg)
    params = init_params(cfg, seed=0)
    metrics = tmp_path / "rl.jsonl"
    with MetricsWriter(metrics) as writer:
        train_rl(cfg, params, split, seed=0, writer=writer, checkpoint_dir=tmp_path, dump_path=tmp_path / "dump.bin")
    records = read_metrics(metrics)
    assert [r["update"] for r in records] == [0, 1, 2]
    for key in ("seen_success", "holdout_success", "loss_action", "loss_value", "clip_frac", "grad_norm", "explained_var"):
        assert key in records[-1], f"missing {key}"
    assert records[0]["loss_action"] is None
    assert records[1]["first_ratio_dev"] <= 1e-5
    assert len(records[-1]["length_hist"]) == cfg.n_candidates
    assert (tmp_path / "rl_latest.ckpt").exists()
    trajs, d_model, _ = read_rollouts(tmp_path / "dump.bin")
    assert d_model == cfg.d_model and len(trajs) == 2
    assert params.step == cfg.updates * cfg.epochs * cfg.minibatches


def test_success_gain_skips_unevaluated_updates():
    history = [{"seen_success": 0.2}, {"seen_success": None}, {"seen_success": 0.5}]
    assert success_gain(history) == pytest.approx(0.3)
    assert math.isnan(success_gain([{"seen_success": None}]))


def test_total_loss_gradients_match_finite_differences(cfg):
    params, buffer = _make_buffer(cfg, n_traj=2)
    steps = buffer.valid_steps()[:6]
    rng = np.random.default_rng(3)
    adv, returns = rng.normal(size=len(steps)), rng.normal(size=len(steps))

    def fn(tape, leaves):
        return total_loss(tape, leaves, cfg, steps, adv, returns).total

    err = finite_diff_check(fn, params.tensors, h=1e-5, n_coords=50, floor=1e-3)
    assert err < 1e-3, f"relative gradient error {err}"


def test_end_ratio_shares_the_action_clamp():
    tape = Tape(dtype=np.float64)
    new = tape.leaf(np.array([0.0, -50.0]))
    term = ratio_end(tape, new, np.array([math.log(2.0), 0.0]))
    assert np.allclose(tape.value(term.node), [0.5, math.exp(-RATIO_EXP_BOUND)])
    assert list(term.clamped) == [False, True]


def test_compute_gae_uses_the_padded_buffer(cfg):
    _, buffer = _make_buffer(cfg, n_traj=3)
    a = buffer.arrays()
    expected, _ = gae_arrays(a["rewards"], a["values"], a["dones"], a["valid"], gamma=0.99, lam=0.95)
    record = compute_gae(buffer, 0.99, 0.95)
    assert np.allclose(record.advantages, expected)
    normalized = compute_gae(buffer, 0.99, 0.95, normalize=True)
    assert np.all(normalized.advantages[~a["valid"]] == 0.0)
    assert np.allclose(normalized.returns, record.returns)


def test_nan_during_evaluation_keeps_the_last_good_checkpoint(tmp_path, monkeypatch):
    cfg = small_config(updates=2, eval_every=1, rollout_batch=2)
    split = _make_split(cfg)
    params = init_params(cfg, seed=0)
    start = params.copy()
    real_evaluate = lapo._evaluate
    calls = []

    def failing_evaluate(*args):
        calls.append(1)
        if len(calls) > 1:
            raise NumericError("nan in eval")
        return real_evaluate(*args)

    monkeypatch.setattr(lapo, "_evaluate", failing_evaluate)
    with pytest.raises(NumericAbort) as info:
        train_rl(cfg, params, split, seed=0, checkpoint_dir=tmp_path)
    saved = tmp_path / "last_good.ckpt"
    assert info.value.checkpoint == str(saved)
    restored = PolicyParams.from_groups(read_checkpoint(saved))
    for name, value in start.tensors.items():
        assert np.array_equal(restored.tensors[name], value), name


def test_padding_steps_do_not_change_the_loss(cfg):
    params, buffer = _make_buffer(cfg, n_traj=2)
    steps = buffer.valid_steps()[:5]
    rng = np.random.default_rng(4)
    adv, returns = rng.normal(size=5), rng.normal(size=5)
    pad = padding_step(steps[0])
    mixed = steps[:2] + [pad] + steps[2:] + [pad, pad]
    mixed_adv = np.concatenate([adv[:2], [50.0], adv[2:], [-50.0, 50.0]])
    mixed_returns = np.concatenate([returns[:2], [9.0], returns[2:], [9.0, 9.0]])

    def loss_and_grads(batch, a, r):
        tape = Tape(dtype=RECORD_DTYPE)
        p = LazyParams(tape, params.tensors)
        parts = total_loss(tape, p, cfg, batch, a, r)
        return float(tape.value(parts.total)), p.gradients(tape.backward(parts.total))

    loss, grads = loss_and_grads(steps, adv, returns)
    padded_loss, padded_grads = loss_and_grads(mixed, mixed_adv, mixed_returns)
    assert padded_loss == pytest.approx(loss, abs=1e-12)
    for name, g in grads.items():
        assert np.allclose(padded_grads[name], g, rtol=0.0, atol=1e-12), name


def test_value_loss_gradient_reaches_the_trunk(cfg):
    params = _randomize_value_head(init_params(cfg, seed=1))
    buffer = collect_rollouts(params.snapshot(), cfg, _make_split(cfg).seen, 2, rollout_mode(cfg), 0)
    steps = buffer.valid_steps()[:4]
    tape = Tape(dtype=RECORD_DTYPE)
    p = LazyParams(tape, params.tensors)
    parts = total_loss(tape, p, cfg, steps, np.zeros(len(steps)), np.full(len(steps), 5.0))
    grads = p.gradients(tape.backward(parts.value_loss))
    for name in ("value_head.w1", "trunk.0.mlp.w1", "trunk.0.attn.q0", "prompt.w1", "embed.task"):
        assert np.any(grads[name] != 0.0), f"no value gradient on {name}"
    # the <latent_end> row never attends to the action placeholders
    assert not np.any(grads["action.placeholders"])
    assert not np.any(grads["action_head.w"])


def test_forward_joint_changes_after_one_optimizer_step(cfg):
    params, buffer = _make_buffer(cfg, n_traj=2)
    steps = buffer.valid_steps()[:6]
    batch = StepBatch.from_steps(steps, cfg)
    rng = np.random.default_rng(2)
    adv, returns = rng.normal(size=len(steps)), rng.normal(size=len(steps))

    def joint(tensors):
        tape = Tape(dtype=RECORD_DTYPE)
        out = forward_joint(
            tape,
            LazyParams(tape, tensors),
            cfg,
            batch.observations,
            batch.task_ids,
            batch.z_full,
            batch.n_used,
            batch.tokens,
            batch.length_index,
        )
        return tape.value(out.logp_actions), tape.value(out.logp_end), tape.value(out.value), tape.value(out.z_theta)

    before = joint(params.tensors)
    assert np.allclose(before[0], batch.logp_a_old, atol=1e-8)

    tape = Tape(dtype=RECORD_DTYPE)
    p = LazyParams(tape, params.tensors)
    grads = p.gradients(tape.backward(total_loss(tape, p, cfg, steps, adv, returns).total))
    AdamW().step(params, grads, 1e-3)
    after = joint(params.tensors)
    for name, old, new in zip(("logp_actions", "logp_end", "value", "z_theta"), before, after):
        assert not np.allclose(old, new, rtol=0.0, atol=1e-9), f"{name} unchanged after the update"


def test_reward_ablated_rollouts_carry_no_learning_signal():
    cfg = small_config(success_reward=0.0, normalize_advantages=False)
    params = init_params(cfg, seed=0)
    buffer = collect_rollouts(params.snapshot(), cfg, _make_split(cfg).seen, 4, rollout_mode(cfg), 0)
    a = buffer.arrays()
    assert not np.any(a["rewards"])
    record = compute_gae(buffer, cfg.gamma, cfg.gae_lambda)
    # zero output layer: every value is 0, so nothing is left to fit
    assert not np.any(record.advantages) and not np.any(record.returns)

    _randomize_value_head(params)
    buffer = collect_rollouts(params.snapshot(), cfg, _make_split(cfg).seen, 4, rollout_mode(cfg), 0)
    record = compute_gae(buffer, cfg.gamma, cfg.gae_lambda)
    for i, traj in enumerate(buffer.trajectories):
        values = np.array([s.value for s in traj.steps])
        expected = _brute_gae(np.zeros(len(values)), values, cfg.gamma, cfg.gae_lambda)
        assert np.allclose(record.advantages[i, : len(values)], expected, atol=1e-9)
