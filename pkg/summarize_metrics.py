#!/usr/bin/env python
"""Cross-run summary of RL metrics written by ``lapo-lab rl`` / ``lapo-lab ablate``.

Reads every ``rl_*.jsonl`` under a metrics directory and prints one row per run
(final seen/holdout success, success gain, mean episode steps, share of
decisions using the two shortest reasoning lengths), then a per-tag mean over
seeds.

Checks implemented:
- Every run logged an evaluation at update 0 and at its final update.
- With ``--compare A B``: mean final seen success of tag A >= tag B.
- With ``--holdout``: final holdout success >= first holdout success per run.

Exit code: 0 if all checks pass, 1 if any fail.
"""
import argparse
import math
import re
import sys
from pathlib import Path

import pandas as pd

from lapo_lab.io.metrics import metrics_frame
from lapo_lab.lapo import success_gain

SEED_SUFFIX = re.compile(r"_seed(\d+)$")
SHORT_CANDIDATES = 2


def load_runs(metrics_dir):
    runs = {}
    for path in sorted(Path(metrics_dir).rglob("*.jsonl")):
        if path.stem.startswith("sft_"):
            continue
        df = metrics_frame(path)
        if "update" in df.columns:
            runs[path.stem] = df
    return runs


def short_share(row):
    hist = [row[c] for c in row.index if c.startswith("hist_") and not pd.isna(row[c])]
    total = sum(hist)
    if not total:
        return math.nan
    return sum(hist[:SHORT_CANDIDATES]) / total


def summarize(runs):
    rows = []
    for name, df in runs.items():
        evaluated = df.dropna(subset=["seen_success"])
        last = evaluated.iloc[-1]
        first = evaluated.iloc[0]
        holdout = evaluated["holdout_success"].dropna() if "holdout_success" in evaluated else pd.Series(dtype=float)
        match = SEED_SUFFIX.search(name)
        rows.append(
            {
                "run": name,
                "tag": SEED_SUFFIX.sub("", name),
                "seed": int(match.group(1)) if match else None,
                "updates": int(df["update"].max()),
                "first_seen": first["seen_success"],
                "final_seen": last["seen_success"],
                "gain": success_gain(evaluated.to_dict("records")),
                "first_holdout": holdout.iloc[0] if len(holdout) else math.nan,
                "final_holdout": holdout.iloc[-1] if len(holdout) else math.nan,
                "first_steps": first.get("mean_episode_steps", math.nan),
                "final_steps": last.get("mean_episode_steps", math.nan),
                "first_short": short_share(first),
                "final_short": short_share(last),
            }
        )
    return pd.DataFrame(rows)


def check_eval_records(runs):
    errors = []
    for name, df in runs.items():
        evaluated = df.dropna(subset=["seen_success"])["update"].tolist()
        if not evaluated or evaluated[0] != 0:
            errors.append(f"{name}: no evaluation at update 0.")
        if not evaluated or evaluated[-1] != df["update"].max():
            errors.append(f"{name}: no evaluation at the final update.")
    return errors


def check_compare(summary, tag_a, tag_b):
    means = summary.groupby("tag")["final_seen"].mean()
    missing = [t for t in (tag_a, tag_b) if t not in means]
    if missing:
        return [f"No runs tagged {', '.join(missing)}."]
    if means[tag_a] < means[tag_b]:
        return [f"Mean final success of {tag_a} ({means[tag_a]:.3f}) is below {tag_b} ({means[tag_b]:.3f})."]
    return []


def check_holdout(summary):
    errors = []
    for _, row in summary.iterrows():
        if pd.isna(row["first_holdout"]):
            errors.append(f"{row['run']}: no holdout evaluations logged.")
        elif row["final_holdout"] < row["first_holdout"]:
            errors.append(
                f"{row['run']}: holdout success fell from {row['first_holdout']:.3f} to {row['final_holdout']:.3f}."
            )
    return errors


def main():
    ap = argparse.ArgumentParser(description="Summarize and compare RL metric runs")
    ap.add_argument("--dir", required=True, help="Metrics directory (e.g. lapo_runs/metrics)")
    ap.add_argument("--compare", nargs=2, metavar=("TAG_A", "TAG_B"), help="Require mean final SR of A >= B")
    ap.add_argument("--holdout", action="store_true", help="Require non-decreasing holdout success")
    ap.add_argument("--csv", default=None, help="Also write the per-run table to this CSV path")
    args = ap.parse_args()

    runs = load_runs(args.dir)
    if not runs:
        print(f"No RL metrics found under {args.dir}")
        sys.exit(1)
    summary = summarize(runs)
    with pd.option_context("display.width", 160, "display.max_columns", None):
        print(summary.drop(columns=["tag"]).to_string(index=False, float_format=lambda v: f"{v:.3f}"))
        print()
        print(summary.groupby("tag")[["final_seen", "gain", "final_holdout", "final_steps"]].mean().to_string())
    if args.csv:
        summary.to_csv(args.csv, index=False)

    errors = check_eval_records(runs)
    if args.compare:
        errors += check_compare(summary, *args.compare)
    if args.holdout:
        errors += check_holdout(summary)

    print()
    print("SUMMARY CHECKS PASSED" if not errors else "SUMMARY CHECKS FAILED")
    for e in errors:
        print(f" - {e}")
    sys.exit(0 if not errors else 1)


if __name__ == "__main__":
    main()
