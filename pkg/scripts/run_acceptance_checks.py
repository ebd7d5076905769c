"""End-to-end acceptance checks run against the library directly.

Quick checks (default) take a few minutes on a laptop CPU:
  gradients, ratio identity over three update rounds, deterministic metrics,
  checkpoint round trip.

``--full`` adds the learning-dynamics checks on configs/reach.yaml and
configs/reach_pickplace.yaml (SFT warm-up, LAPO vs. action-only PPO over three
seeds, per-suite success gain, reasoning-length and episode-length shifts,
holdout non-degradation). Expect tens of minutes per seed.
"""

import argparse
import filecmp
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from lapo_lab.cli import demo_seed, demo_tasks
from lapo_lab.chunkgrid import ChunkGridEnv, TaskSpec, scripted_expert
from lapo_lab.evaluation import eval_policy
from lapo_lab.io.formats import decode_checkpoint, encode_checkpoint
from lapo_lab.io.metrics import MetricsWriter, read_metrics
from lapo_lab.io.schemas import ExperimentConfig, TrainConfig, baseline_updates, load_experiment
from lapo_lab.lapo import collect_rollouts, holdout_protocol, ratio_identity_gap, rl_update, total_loss, train_rl
from lapo_lab.latent_oracle import FeatureTeacher, LatentCache, build_cache_records
from lapo_lab.optim import AdamW
from lapo_lab.policy import VALUE_GROUP, PolicyParams, act, eval_mode, init_params, rollout_mode
from lapo_lab.sft import assemble_batch, build_examples, sft_loss, train_sft
from lapo_lab.tape import finite_diff_check

QUICK = dict(
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
    epochs=2,
    eval_rollouts=1,
)
REPO = Path(__file__).resolve().parents[1]


def quick_experiment(**train):
    return ExperimentConfig(train=TrainConfig(**{**QUICK, **train}), suites=["reach"], holdout_variant=2)


def warm_start(exp, seed):
    cfg = exp.train
    demos = [
        scripted_expert(task, demo_seed(seed, task, j), cfg.horizon, cfg.action_dim)
        for task in demo_tasks(exp)
        for j in range(exp.demos_per_task)
    ]
    teacher = FeatureTeacher(cfg.teacher_seed, cfg.teacher_dim)
    cache = LatentCache(build_cache_records(demos, teacher, cfg.topk, cfg.n_max, cfg.latent_stride, cfg.grid_size))
    return demos, cache, train_sft(cfg, demos, cache, seed)


def check_gradients():
    exp = quick_experiment()
    cfg = exp.train
    demos, cache, params = warm_start(exp.with_train(sft_steps=5), 0)
    batch = assemble_batch(build_examples(demos, cfg), cache, cfg, np.random.default_rng(0), 3)
    err = finite_diff_check(lambda tape, p: sft_loss(tape, p, cfg, batch).total, params.tensors, 1e-5, 50, 0, 1e-3)
    assert err < 1e-3, f"sft_loss gradient error {err}"

    buffer = collect_rollouts(params.snapshot(), cfg, holdout_protocol(exp).seen, 2, rollout_mode(cfg), 0)
    steps = buffer.valid_steps()[:6]
    rng = np.random.default_rng(1)
    adv, ret = rng.normal(size=len(steps)), rng.normal(size=len(steps))
    err = finite_diff_check(lambda tape, p: total_loss(tape, p, cfg, steps, adv, ret).total, params.tensors, 1e-5, 50, 1, 1e-3)
    assert err < 1e-3, f"total_loss gradient error {err}"


def check_ratio_identity(rounds=3):
    exp = quick_experiment()
    cfg = exp.train
    params = init_params(cfg, 0)
    opt = AdamW(weight_decay=cfg.rl_weight_decay, lr_scale={VALUE_GROUP: cfg.value_lr_mult})
    split = holdout_protocol(exp)
    rng = np.random.default_rng(0)
    for update in range(1, rounds + 1):
        buffer = collect_rollouts(params.snapshot(), cfg, split.seen, cfg.rollout_batch, rollout_mode(cfg), 0, update)
        gap = ratio_identity_gap(params.tensors, cfg, buffer.valid_steps())
        assert gap <= 1e-5, f"round {update}: ratios deviate from 1 by {gap}"
        rl_update(params, cfg, opt, buffer, rng)


def _rl_metrics(exp, out: Path):
    params = init_params(exp.train, 0)
    with MetricsWriter(out) as writer:
        train_rl(exp.train, params, holdout_protocol(exp), 0, writer)
    return params


def check_determinism():
    exp = quick_experiment(updates=3, eval_every=1)
    with tempfile.TemporaryDirectory() as tmp:
        a, b = Path(tmp) / "a.jsonl", Path(tmp) / "b.jsonl"
        params = _rl_metrics(exp, a)
        _rl_metrics(exp, b)
        assert filecmp.cmp(a, b, shallow=False), "metric files differ between identical runs"

    restored = PolicyParams.from_groups(decode_checkpoint(encode_checkpoint(params.to_groups())))
    cfg = exp.train
    task = TaskSpec("reach", 1, cfg.n_variants, cfg.grid_size)
    obs = ChunkGridEnv(task).reset(3)
    for tensors in (params.tensors, restored.tensors):
        d = act(tensors, cfg, obs, task.task_id, eval_mode(cfg), 0.0)
        if tensors is params.tensors:
            expected = (d.tokens.tolist(), d.value, d.n_latent)
        else:
            assert (d.tokens.tolist(), d.value, d.n_latent) == expected, "checkpoint changed the policy outputs"


def _short_mass(hist):
    total = sum(hist)
    return sum(hist[:2]) / total if total else 0.0


def check_learning(config_path: Path, seeds=(0, 1, 2)):
    exp = load_experiment(config_path)
    finals = {"lapo": [], "ppo-action-only": []}
    warm_sr, best_sr = [], []
    suite_before = {name: [] for name in exp.suites}
    suite_after = {name: [] for name in exp.suites}
    with tempfile.TemporaryDirectory() as tmp:
        for seed in seeds:
            _, _, warm = warm_start(exp, seed)
            split = holdout_protocol(exp)
            cfg = exp.train
            warm_sr.append(eval_policy(warm, cfg, split.seen + split.holdout, cfg.eval_rollouts, seed).success_rate)
            for baseline in finals:
                run = exp.with_train(**baseline_updates(baseline))
                cfg = run.train
                before = eval_policy(warm, cfg, split.seen, cfg.eval_rollouts, seed)
                path = Path(tmp) / f"{baseline}_{seed}.jsonl"
                with MetricsWriter(path) as writer:
                    params = train_rl(cfg, warm.copy(), split, seed, writer)
                after = eval_policy(params, cfg, split.seen, cfg.eval_rollouts, seed)
                finals[baseline].append(after.success_rate)
                if baseline != "lapo":
                    continue
                evaluated = [r for r in read_metrics(path) if r["seen_success"] is not None]
                best_sr.append(max(r["seen_success"] for r in evaluated))
                assert after.mean_episode_steps <= before.mean_episode_steps, f"seed {seed}: episodes got longer"
                assert _short_mass(after.length_hist) > _short_mass(before.length_hist), f"seed {seed}: no shift to short reasoning"
                assert after.success_rate >= before.success_rate, f"seed {seed}: eval SR decreased"
                for name in exp.suites:
                    suite_before[name].append(before.suites[name].success_rate)
                    suite_after[name].append(after.suites[name].success_rate)
                held = [r["holdout_success"] for r in evaluated if r["holdout_success"] is not None]
                assert held and held[-1] >= held[0] - 0.05, f"seed {seed}: holdout SR fell from {held[0]} to {held[-1]}"
    assert np.mean(warm_sr) >= 0.6, f"warm-up mean SR {np.mean(warm_sr):.3f} below 0.6"
    assert np.mean(best_sr) >= 0.9, f"LAPO mean best SR {np.mean(best_sr):.3f} below 0.9"
    lapo, ppo = np.mean(finals["lapo"]), np.mean(finals["ppo-action-only"])
    assert lapo >= ppo, f"LAPO mean final SR {lapo:.3f} below action-only PPO {ppo:.3f}"
    for name in exp.suites:
        first, last = np.mean(suite_before[name]), np.mean(suite_after[name])
        assert last >= first, f"{name}: mean SR fell from {first:.3f} to {last:.3f}"
        assert last > first or first == 1.0, f"{name}: no success gain from {first:.3f}"
        print(f"{config_path.name} {name}: SR {first:.3f} -> {last:.3f}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description="Run lapo-lab acceptance checks")
    ap.add_argument("--full", action="store_true", help="Also run the learning-dynamics checks")
    ap.add_argument(
        "--config",
        nargs="+",
        default=[str(REPO / "configs" / name) for name in ("reach.yaml", "reach_pickplace.yaml")],
        help="Experiment files for the learning checks",
    )
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING, format="[%(levelname)s] %(message)s")

    check_gradients()
    check_ratio_identity()
    check_determinism()
    if args.full:
        for config in args.config:
            check_learning(Path(config))
    print("Acceptance checks passed.")
    sys.exit(0)
