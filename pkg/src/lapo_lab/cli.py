"""Command-line interface for lapo_lab using Click.

Commands:
  gen-demos           -> Write scripted-expert demonstrations
  precompute-latents  -> Build the latent-target cache from a demo file
  sft                 -> Supervised warm-up from demos and latent targets
  rl                  -> Online RL from a warm checkpoint
  eval                -> Greedy evaluation, per-suite and per-variant success
  ablate              -> Sweep TrainConfig values over RL runs
  replay              -> Re-render a dumped rollout buffer in ASCII
  export              -> Turn JSONL metrics into CSV summaries

Usage examples:
  lapo-lab gen-demos --suite reach
  lapo-lab precompute-latents
  lapo-lab sft --seed 0
  lapo-lab rl --seed 0 --baseline ppo-action-only
  lapo-lab eval --checkpoint lapo_runs/checkpoints/rl_lapo_seed0.ckpt --suite reach
  lapo-lab ablate --grid lambda1=0,0.1,0.5,1 --jobs 2

Outputs go under $LAPO_LAB_DIR (default ./lapo_runs).
"""

from __future__ import annotations

import itertools
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import numpy as np

from . import __version__
from .chunkgrid import SUITE_IDS, TaskSpec, decode_observation, micro_states, render, scripted_expert
from .errors import ConfigError, LapoError, NumericAbort, NumericError
from .evaluation import ExpertAgent, eval_policy
from .io import settings
from .io.formats import read_cache, read_checkpoint, read_demos, read_rollouts, write_cache, write_checkpoint, write_demos
from .io.metrics import MetricsWriter, _record_manifest, export_csv
from .io.schemas import (
    BASELINES,
    ExperimentConfig,
    PathsConfig,
    baseline_updates,
    load_experiment,
    parse_grid,
    parse_latent_mode,
)
from .lapo import holdout_protocol, train_rl
from .latent_oracle import FeatureTeacher, LatentCache, build_cache_records
from .policy import PolicyParams, init_params
from .sft import train_sft

logger = logging.getLogger(__name__)

# --------------------- helpers ---------------------


@contextmanager
def _guard(label: str):
    """Single-line diagnostics; exit 2 on numeric aborts, 1 on everything else."""
    try:
        yield
    except (NumericAbort, NumericError) as e:
        where = f" (last good checkpoint: {e.checkpoint})" if getattr(e, "checkpoint", None) else ""
        click.echo(f"Error: {label} aborted: {e}{where}", err=True)
        sys.exit(2)
    except (LapoError, OSError) as e:
        click.echo(f"Error: {label} failed: {e}", err=True)
        sys.exit(1)
    except Exception as e:
        logging.exception("%s failed", label)
        click.echo(f"Error: {label} failed: {e}", err=True)
        sys.exit(1)


@dataclass
class RunContext:
    exp: ExperimentConfig
    paths: PathsConfig
    seed: int
    deterministic: bool


def _context(
    config: Optional[str],
    seed: Optional[int],
    deterministic: bool,
    suite: Optional[str],
    holdout_variant: Optional[int],
    latent_mode: Optional[str],
    jobs: int,
    baseline: str = "lapo",
) -> RunContext:
    exp = load_experiment(Path(config) if config else None)
    updates: Dict[str, object] = {}
    updates.update(baseline_updates(baseline))
    if latent_mode:
        updates.update(parse_latent_mode(latent_mode))
    updates["rollout_workers"] = 1 if deterministic else max(jobs, 1)
    exp = exp.with_train(**updates)
    overrides: Dict[str, object] = {}
    if suite:
        overrides["suites"] = [suite]
    if holdout_variant is not None:
        overrides["holdout_variant"] = holdout_variant
    if overrides:
        exp = ExperimentConfig.model_validate({**exp.model_dump(), **overrides})
    paths = exp.paths.resolved(settings.output_root())
    return RunContext(exp, paths, exp.seeds[0] if seed is None else seed, deterministic)


def common_options(func):
    options = [
        click.option("--config", type=click.Path(exists=True, dir_okay=False), default=None, help="YAML experiment file."),
        click.option("--seed", type=int, default=None, help="Run seed (default: first of config seeds)."),
        click.option("--deterministic", is_flag=True, help="Single rollout worker, bit-exact reruns."),
        click.option(
            "--suite",
            type=click.Choice(["reach", "pickplace", "sequence", "all"]),
            default=None,
            help="Task suite (overrides config).",
        ),
        click.option("--holdout-variant", type=int, default=None, help="Variant index kept out of training."),
        click.option("--latent-mode", default=None, help="fixed:N or adaptive."),
        click.option("--jobs", type=int, default=1, show_default=True, help="Worker count."),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def _read_params(path: Path, cfg) -> PolicyParams:
    params = PolicyParams.from_groups(read_checkpoint(path))
    expected = init_params(cfg, 0).tensors
    for name, value in expected.items():
        got = params.tensors.get(name)
        if got is None or got.shape != value.shape:
            raise ConfigError(f"checkpoint {path} does not match the configured network ({name})")
    return params


def _load_demos(ctx: RunContext):
    cfg = ctx.exp.train
    return read_demos(ctx.paths.demos, cfg.horizon, cfg.action_dim)


def _metrics_writer(ctx: RunContext, tag: str) -> Tuple[Path, MetricsWriter]:
    run_dir = ctx.paths.metrics / tag
    return run_dir, MetricsWriter(run_dir / f"{tag}.jsonl")


def demo_tasks(exp: ExperimentConfig) -> List[TaskSpec]:
    cfg = exp.train
    return [
        TaskSpec(suite, v, cfg.n_variants, cfg.grid_size)
        for suite in exp.suites
        for v in range(cfg.n_variants)
        if v != exp.holdout_variant
    ]


def demo_seed(seed: int, task: TaskSpec, index: int) -> int:
    return int(np.random.SeedSequence([seed, 5, task.task_id, index]).generate_state(1)[0])


# --------------------- CLI group ---------------------


@click.group()
@click.option("--verbose", is_flag=True, help="Enable verbose logging (DEBUG).")
@click.version_option(__version__)
def cli(verbose: bool):
    """lapo_lab CLI."""
    level = logging.DEBUG if verbose else settings.log_level()
    logging.basicConfig(level=level, format="[%(levelname)s] %(message)s")
    if verbose:
        logging.debug("Verbose logging enabled.")
    else:
        logging.debug("Logging level %s.", logging.getLevelName(level))


# --------------------- gen-demos ---------------------


@cli.command("gen-demos")
@common_options
@click.option("--demos-per-task", type=int, default=None, help="Expert demos per variant (default from config).")
@click.option("--render", "render_frames", is_flag=True, help="Print ASCII frames of the first demo.")
def cmd_gen_demos(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs, demos_per_task, render_frames):
    """Write one-shot (or few-shot) scripted-expert demonstrations."""
    with _guard("gen-demos"):
        ctx = _context(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs)
        cfg = ctx.exp.train
        per_task = demos_per_task or ctx.exp.demos_per_task
        if per_task <= 0:
            raise ConfigError("--demos-per-task must be > 0")
        demos = [
            scripted_expert(task, demo_seed(ctx.seed, task, j), cfg.horizon, cfg.action_dim)
            for task in demo_tasks(ctx.exp)
            for j in range(per_task)
        ]
        write_demos(ctx.paths.demos, demos)
        _record_manifest(ctx.paths.demos.parent / "gen-demos", "gen-demos", ctx.exp, ctx.seed, deterministic, ctx.paths)
        if render_frames and demos:
            states, _ = micro_states(demos[0], cfg.grid_size)
            for state in states:
                click.echo(render(state) + "\n")
        click.echo(f"Wrote {len(demos)} demos ({sum(d.n_steps for d in demos)} chunks) to {ctx.paths.demos}")


# --------------------- precompute-latents ---------------------


@cli.command("precompute-latents")
@common_options
def cmd_precompute(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs):
    """Build top-k feature targets for every (trajectory, step, horizon)."""
    with _guard("precompute-latents"):
        ctx = _context(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs)
        cfg = ctx.exp.train
        demos = _load_demos(ctx)
        teacher = FeatureTeacher(cfg.teacher_seed, cfg.teacher_dim)
        records = build_cache_records(
            demos, teacher, cfg.topk, cfg.n_max, cfg.latent_stride, cfg.grid_size, 1 if deterministic else jobs
        )
        write_cache(ctx.paths.cache, records)
        click.echo(f"Wrote {len(records)} latent targets to {ctx.paths.cache}")


# --------------------- sft ---------------------


@cli.command("sft")
@common_options
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Checkpoint path.")
def cmd_sft(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs, out_path):
    """Supervised warm-up; writes a checkpoint and per-step metrics."""
    with _guard("sft"):
        ctx = _context(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs)
        cfg = ctx.exp.train
        demos = _load_demos(ctx)
        cache = LatentCache(read_cache(ctx.paths.cache, cfg.topk))
        tag = f"sft_seed{ctx.seed}"
        run_dir, writer = _metrics_writer(ctx, tag)
        with writer:
            params = train_sft(cfg, demos, cache, ctx.seed, writer)
        out = Path(out_path) if out_path else ctx.paths.checkpoints / f"{tag}.ckpt"
        write_checkpoint(out, params.to_groups())
        _record_manifest(run_dir, "sft", ctx.exp, ctx.seed, deterministic, ctx.paths, {"checkpoint": str(out)})
        click.echo(f"SFT complete: checkpoint {out}, metrics {writer.path}")


# --------------------- rl ---------------------


@cli.command("rl")
@common_options
@click.option("--baseline", type=click.Choice(list(BASELINES)), default="lapo", show_default=True)
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None, help="Warm checkpoint.")
@click.option("--updates", type=int, default=None, help="Number of update rounds (overrides config).")
@click.option("--dump-rollouts", type=click.Path(dir_okay=False), default=None, help="Dump the last rollout buffer.")
def cmd_rl(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs, baseline, checkpoint, updates, dump_rollouts):
    """Online RL from a warm checkpoint."""
    with _guard("rl"):
        ctx = _context(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs, baseline)
        if updates is not None:
            ctx.exp = ctx.exp.with_train(updates=updates)
        cfg = ctx.exp.train
        warm = Path(checkpoint) if checkpoint else ctx.paths.checkpoints / f"sft_seed{ctx.seed}.ckpt"
        params = _read_params(warm, cfg)
        tag = f"rl_{baseline}_seed{ctx.seed}"
        run_dir, writer = _metrics_writer(ctx, tag)
        with writer:
            params = train_rl(
                cfg,
                params,
                holdout_protocol(ctx.exp),
                ctx.seed,
                writer,
                ctx.paths.checkpoints,
                Path(dump_rollouts) if dump_rollouts else None,
            )
        out = ctx.paths.checkpoints / f"{tag}.ckpt"
        write_checkpoint(out, params.to_groups())
        extra = {"baseline": baseline, "warm_checkpoint": str(warm)}
        _record_manifest(run_dir, "rl", ctx.exp, ctx.seed, deterministic, ctx.paths, extra)
        click.echo(f"RL complete: checkpoint {out}, metrics {writer.path}")


# --------------------- eval ---------------------


@cli.command("eval")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None, help="Policy checkpoint.")
@click.option("--expert", is_flag=True, help="Evaluate the scripted expert instead of a checkpoint.")
@click.option("--rollouts", type=int, default=None, help="Episodes per variant (default eval_rollouts).")
@click.option("--render", "render_frames", is_flag=True, help="Print ASCII frames of the first episode.")
def cmd_eval(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs, checkpoint, expert, rollouts, render_frames):
    """Greedy evaluation; prints per-suite and per-variant success."""
    with _guard("eval"):
        ctx = _context(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs)
        cfg = ctx.exp.train
        if not expert and not checkpoint:
            raise ConfigError("eval needs --checkpoint or --expert")
        tasks = [
            TaskSpec(s, v, cfg.n_variants, cfg.grid_size) for s in ctx.exp.suites for v in range(cfg.n_variants)
        ]
        n = rollouts or cfg.eval_rollouts
        if expert:
            report = eval_policy(None, cfg, tasks, n, ctx.seed, agent=ExpertAgent(cfg), render_frames=render_frames)
        else:
            params = _read_params(Path(checkpoint), cfg)
            report = eval_policy(params, cfg, tasks, n, ctx.seed, workers=cfg.rollout_workers, render_frames=render_frames)
        if render_frames and report.episodes:
            for frame in report.episodes[0].frames:
                click.echo(frame + "\n")
        click.echo(report.variant_frame().to_string(index=False))
        click.echo(report.to_frame().to_string(index=False))


# --------------------- ablate ---------------------


def ablate_plan(exp: ExperimentConfig, grid: Dict[str, List[object]], seeds: List[int]) -> List[Tuple[str, Dict[str, object], int]]:
    """Cartesian product of grid values x seeds -> (tag, TrainConfig updates, seed)."""
    keys = list(grid)
    plan = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        updates = dict(zip(keys, combo))
        if "fixed_len" in updates:
            updates["latent_mode"] = "fixed"
        exp.with_train(**updates)
        label = "_".join(f"{k}={v}" for k, v in zip(keys, combo))
        for seed in seeds:
            plan.append((f"ablate_{label}_seed{seed}", updates, seed))
    return plan


def _ablate_run(payload) -> str:
    exp_data, updates, seed, tag, warm, root, deterministic = payload
    exp = ExperimentConfig.model_validate(exp_data).with_train(**updates)
    cfg = exp.train
    paths = PathsConfig.model_validate(root)
    ctx = RunContext(exp, paths, seed, deterministic)
    params = _read_params(Path(warm), cfg)
    run_dir, writer = _metrics_writer(ctx, tag)
    with writer:
        train_rl(cfg, params, holdout_protocol(exp), seed, writer, paths.checkpoints / tag)
    _record_manifest(run_dir, "ablate", exp, seed, deterministic, paths, {"updates": updates, "warm_checkpoint": warm})
    return str(writer.path)


@cli.command("ablate")
@common_options
@click.option("--grid", "grid_specs", multiple=True, required=True, help="key=v1,v2 (repeatable).")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False), default=None, help="Shared warm checkpoint.")
@click.option("--updates", type=int, default=None, help="Update rounds per run.")
def cmd_ablate(config, seed, deterministic, suite, holdout_variant, latent_mode, jobs, grid_specs, checkpoint, updates):
    """Sweep config values; one tagged metrics file per run."""
    with _guard("ablate"):
        ctx = _context(config, seed, deterministic, suite, holdout_variant, latent_mode, 1)
        if updates is not None:
            ctx.exp = ctx.exp.with_train(updates=updates)
        seeds = [ctx.seed] if seed is not None else list(ctx.exp.seeds)
        plan = ablate_plan(ctx.exp, parse_grid(list(grid_specs)), seeds)
        warm = Path(checkpoint) if checkpoint else ctx.paths.checkpoints / f"sft_seed{seeds[0]}.ckpt"
        if not warm.exists():
            raise ConfigError(f"warm checkpoint {warm} not found")
        payloads = [
            (ctx.exp.model_dump(mode="json"), upd, s, tag, str(warm), ctx.paths.model_dump(mode="json"), deterministic)
            for tag, upd, s in plan
        ]
        click.echo(f"Running {len(payloads)} ablation runs ({jobs} jobs)")
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                written = list(pool.map(_ablate_run, payloads))
        else:
            written = [_ablate_run(p) for p in payloads]
        for path in written:
            click.echo(f" - {path}")


# --------------------- replay ---------------------


@cli.command("replay")
@click.option("--dump", "dump_path", required=True, type=click.Path(exists=True, dir_okay=False), help="LAPOROL1 file.")
@click.option("--index", type=int, default=0, show_default=True, help="Trajectory to render.")
@click.option("--grid-size", type=int, default=8, show_default=True)
def cmd_replay(dump_path, index, grid_size):
    """Re-render a dumped rollout trajectory in ASCII."""
    with _guard("replay"):
        trajectories, _, _ = read_rollouts(Path(dump_path))
        if not 0 <= index < len(trajectories):
            raise ConfigError(f"--index {index} out of range for {len(trajectories)} trajectories")
        traj = trajectories[index]
        click.echo(f"{traj.suite} variant {traj.variant} (suite id {SUITE_IDS[traj.suite]}), {len(traj.steps)} steps")
        for t, step in enumerate(traj.steps):
            click.echo(render(decode_observation(step.observation, grid_size)))
            click.echo(
                f"t={t} latents={step.latents.shape[0]} logp_a={step.logp_a:.3f} "
                f"value={step.value:.3f} reward={step.reward:g} done={step.done}\n"
            )


# --------------------- export ---------------------


@cli.command("export")
@click.option("--metrics", "metrics_path", required=True, type=click.Path(exists=True), help="JSONL file or directory.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False), help="CSV output directory.")
def cmd_export(metrics_path, out_dir):
    """Write CSV summaries for JSONL metric files."""
    with _guard("export"):
        src = Path(metrics_path)
        files = sorted(src.rglob("*.jsonl")) if src.is_dir() else [src]
        if not files:
            raise ConfigError(f"no .jsonl files under {src}")
        for f in files:
            written = export_csv(f, Path(out_dir))
            click.echo(f"{f}: " + ", ".join(str(p) for p in written.values()))


# --------------------- entry ---------------------


def main():  # pragma: no cover
    cli()


if __name__ == "__main__":  # pragma: no cover
    main()
