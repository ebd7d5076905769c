import numpy as np

from lapo_lab.chunkgrid import SUITES, TaskSpec
from lapo_lab.evaluation import ExpertAgent, episode_seed, eval_policy, run_episode
from lapo_lab.policy import init_params


def _make_tasks(cfg, suites=("reach",)):
    return [TaskSpec(s, v, cfg.n_variants, cfg.grid_size) for s in suites for v in range(cfg.n_variants)]


def _outcomes(report):
    return {(ep.task, ep.seed): (ep.success, ep.micro_steps, tuple(ep.lengths)) for ep in report.episodes}


def test_expert_solves_every_suite(cfg):
    tasks = _make_tasks(cfg, SUITES)
    report = eval_policy(None, cfg, tasks, n_rollouts=2, seed=0, agent=ExpertAgent(cfg))
    assert report.success_rate == 1.0
    for name in SUITES:
        assert report.suites[name].success_rate == 1.0, f"expert failed on {name}"
        assert report.suites[name].episodes == 2 * cfg.n_variants


def test_results_do_not_depend_on_rollout_order(cfg):
    params = init_params(cfg, seed=0)
    tasks = _make_tasks(cfg)
    forward = eval_policy(params, cfg, tasks, n_rollouts=2, seed=7)
    backward = eval_policy(params, cfg, list(reversed(tasks)), n_rollouts=2, seed=7)
    threaded = eval_policy(params, cfg, tasks, n_rollouts=2, seed=7, workers=3)
    assert _outcomes(forward) == _outcomes(backward) == _outcomes(threaded)


def test_untrained_policy_fails_the_sequence_suite(cfg):
    params = init_params(cfg, seed=0)
    report = eval_policy(params, cfg, _make_tasks(cfg, ("sequence",)), n_rollouts=2, seed=0)
    assert report.success_rate <= 0.1


def test_episode_seeds_are_per_task_and_index(cfg):
    a, b = _make_tasks(cfg)[:2]
    assert episode_seed(0, a, 0) == episode_seed(0, a, 0)
    assert len({episode_seed(0, a, 0), episode_seed(0, a, 1), episode_seed(0, b, 0), episode_seed(1, a, 0)}) == 4


def test_rendered_episode_has_a_frame_per_decision(cfg):
    task = _make_tasks(cfg)[0]
    ep = run_episode(ExpertAgent(cfg), task, seed=3, cfg=cfg, render_frames=True)
    assert ep.success
    decisions = -(-ep.micro_steps // cfg.horizon)
    assert len(ep.frames) == decisions + 1
    assert ep.frames[0].startswith("reach step 0/")


def test_report_frames(cfg):
    params = init_params(cfg, seed=1)
    report = eval_policy(params, cfg, _make_tasks(cfg), n_rollouts=1, seed=0)
    frame = report.to_frame()
    expected = ["suite", "episodes", "success_rate", "mean_episode_steps"] + [f"len_{c}" for c in cfg.candidates]
    assert list(frame.columns) == expected
    assert frame.loc[0, "episodes"] == cfg.n_variants
    assert sum(report.length_hist) > 0
    variants = report.variant_frame()
    assert sorted(variants["variant"].tolist()) == list(range(cfg.n_variants))
    assert np.all(variants["episodes"] == 1)
