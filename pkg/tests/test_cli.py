import json

import pytest
import yaml
from click.testing import CliRunner

from conftest import SMALL, small_config
from lapo_lab.cli import ablate_plan, cli, demo_tasks
from lapo_lab.errors import ConfigError
from lapo_lab.io.formats import read_cache, read_checkpoint, read_demos
from lapo_lab.io.metrics import read_manifest, read_metrics
from lapo_lab.io.schemas import ExperimentConfig, parse_grid
from lapo_lab.latent_oracle import LatentCache
from lapo_lab.policy import PolicyParams
from lapo_lab.sft import train_sft


def _write_config(tmp_path, **train):
    data = {
        "train": {**SMALL, "sft_steps": 2, "updates": 1, "eval_every": 1, "rollout_batch": 2, **train},
        "suites": ["reach"],
        "holdout_variant": 2,
        "seeds": [0],
    }
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return str(path)


def _invoke(*args):
    result = CliRunner().invoke(cli, list(args))
    assert result.exit_code == 0, f"{args[0]} failed: {result.output}"
    return result


def test_full_pipeline(output_root, tmp_path):
    config = _write_config(tmp_path)
    out = _invoke("gen-demos", "--config", config)
    assert "Wrote 2 demos" in out.output
    _invoke("precompute-latents", "--config", config)
    assert (output_root / "latents.bin").exists()
    _invoke("sft", "--config", config)
    sft_ckpt = output_root / "checkpoints" / "sft_seed0.ckpt"
    assert sft_ckpt.exists()
    assert len(read_metrics(output_root / "metrics" / "sft_seed0" / "sft_seed0.jsonl")) == 2

    dump = tmp_path / "buffer.bin"
    _invoke("rl", "--config", config, "--deterministic", "--dump-rollouts", str(dump))
    records = read_metrics(output_root / "metrics" / "rl_lapo_seed0" / "rl_lapo_seed0.jsonl")
    assert [r["update"] for r in records] == [0, 1]
    manifest = json.loads((output_root / "metrics" / "rl_lapo_seed0" / "run.json").read_text())
    assert manifest["seed"] == 0 and manifest["deterministic"] is True

    rl_ckpt = output_root / "checkpoints" / "rl_lapo_seed0.ckpt"
    out = _invoke("eval", "--config", config, "--checkpoint", str(rl_ckpt), "--rollouts", "1")
    assert "success_rate" in out.output and "len_8" in out.output

    out = _invoke("replay", "--dump", str(dump), "--index", "1")
    assert "reach variant" in out.output

    csv_dir = tmp_path / "csv"
    _invoke("export", "--metrics", str(output_root / "metrics"), "--out-dir", str(csv_dir))
    assert (csv_dir / "rl_lapo_seed0.csv").exists()
    assert (csv_dir / "rl_lapo_seed0_success.csv").exists()


def test_action_only_baseline_runs_without_latents(output_root, tmp_path):
    config = _write_config(tmp_path)
    for command in ("gen-demos", "precompute-latents", "sft"):
        _invoke(command, "--config", config)
    _invoke("rl", "--config", config, "--baseline", "ppo-action-only")
    records = read_metrics(output_root / "metrics" / "rl_ppo-action-only_seed0" / "rl_ppo-action-only_seed0.jsonl")
    assert records[-1]["loss_latent"] is None
    assert records[-1]["loss_end"] is None
    assert records[-1]["length_hist"] == []


def test_expert_eval_reports_full_success(output_root, tmp_path):
    config = _write_config(tmp_path)
    out = _invoke("eval", "--config", config, "--expert", "--suite", "all", "--rollouts", "1")
    lines = [line.split() for line in out.output.splitlines() if line.split() and line.split()[0] in ("reach", "sequence")]
    assert lines, out.output
    assert all("1.0" in row for row in lines)


def test_eval_without_policy_is_an_error(output_root, tmp_path):
    result = CliRunner().invoke(cli, ["eval", "--config", _write_config(tmp_path)])
    assert result.exit_code == 1
    assert "Error: eval failed" in result.output


def test_bad_config_exits_with_one(output_root, tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("train:\n  gamma: 1.0\n", encoding="utf-8")
    result = CliRunner().invoke(cli, ["gen-demos", "--config", str(path)])
    assert result.exit_code == 1
    assert "gamma" in result.output


def test_missing_warm_checkpoint_exits_with_one(output_root, tmp_path):
    result = CliRunner().invoke(cli, ["rl", "--config", _write_config(tmp_path)])
    assert result.exit_code == 1


def test_ablation_plan_tags_every_value():
    exp = ExperimentConfig(train=small_config())
    plan = ablate_plan(exp, parse_grid(["lambda1=0,0.1,0.5,1"]), [0])
    assert [tag for tag, _, _ in plan] == [
        "ablate_lambda1=0_seed0",
        "ablate_lambda1=0.1_seed0",
        "ablate_lambda1=0.5_seed0",
        "ablate_lambda1=1_seed0",
    ]
    fixed = ablate_plan(exp, parse_grid(["n_z=2,4"]), [0, 1])
    assert len(fixed) == 4
    assert all(updates["latent_mode"] == "fixed" for _, updates, _ in fixed)


def test_demo_tasks_skip_the_holdout_variant():
    exp = ExperimentConfig(train=small_config(), suites=["reach", "pickplace"], holdout_variant=1)
    tasks = demo_tasks(exp)
    assert len(tasks) == 4
    assert all(t.variant != 1 for t in tasks)


def test_sft_run_rebuilds_from_its_manifest(output_root, tmp_path):
    config = _write_config(tmp_path)
    for command in ("gen-demos", "precompute-latents"):
        _invoke(command, "--config", config)
    _invoke("sft", "--config", config, "--seed", "3")

    exp, seed, manifest = read_manifest(output_root / "metrics" / "sft_seed3" / "run.json")
    assert seed == 3 and manifest["command"] == "sft"
    assert exp.suites == ["reach"] and exp.holdout_variant == 2
    assert exp.paths.demos == output_root / "demos.bin"

    cfg = exp.train
    demos = read_demos(exp.paths.demos, cfg.horizon, cfg.action_dim)
    cache = LatentCache(read_cache(exp.paths.cache, cfg.topk))
    rebuilt = train_sft(cfg, demos, cache, seed)
    saved = PolicyParams.from_groups(read_checkpoint(manifest["checkpoint"]))
    assert rebuilt.digest() == saved.digest()


def test_manifest_with_edited_config_is_rejected(output_root, tmp_path):
    config = _write_config(tmp_path)
    _invoke("gen-demos", "--config", config)
    path = output_root / "gen-demos" / "run.json"
    manifest = json.loads(path.read_text())
    manifest["experiment"]["train"]["gamma"] = 0.5
    path.write_text(json.dumps(manifest))
    with pytest.raises(ConfigError, match="digest"):
        read_manifest(path)
