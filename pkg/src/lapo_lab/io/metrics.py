"""Append-only JSONL metrics, run manifests and CSV summaries."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd
from pydantic import ValidationError

from ..errors import ConfigError
from .schemas import ExperimentConfig, PathsConfig

logger = logging.getLogger(__name__)


def _clean(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if hasattr(value, "item"):
        return _clean(value.item())
    return value


class MetricsWriter:
    """One JSON object per line, flushed per record."""

    def __init__(self, path: Path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a" if append else "w", encoding="utf-8")
        self.count = 0

    def write(self, record: Dict[str, Any]) -> None:
        self._fh.write(json.dumps(_clean(record), sort_keys=False) + "\n")
        self._fh.flush()
        self.count += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class NullWriter:
    count = 0

    def write(self, record: Dict[str, Any]) -> None:
        pass

    def close(self) -> None:
        pass


def read_metrics(path: Path) -> List[Dict[str, Any]]:
    """Parse a JSONL file; a torn final line (crashed run) is skipped."""
    records = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError:
            if n == len(lines) - 1:
                logger.warning("Ignoring truncated last line in %s", path)
                continue
            raise
    return records


def write_manifest(
    run_dir: Path,
    command: str,
    exp: ExperimentConfig,
    seed: int,
    deterministic: bool,
    paths: Optional[PathsConfig] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """``run.json``: the full experiment (with resolved paths) plus seed, enough to rerun."""
    from .. import __version__

    experiment = exp.model_dump(mode="json")
    if paths is not None:
        experiment["paths"] = paths.model_dump(mode="json")
    manifest = {
        "command": command,
        "config_sha256": exp.train.digest(),
        "experiment": experiment,
        "seed": seed,
        "deterministic": deterministic,
        "version": __version__,
    }
    manifest.update(extra or {})
    path = Path(run_dir) / "run.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(manifest), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path: Path) -> Tuple[ExperimentConfig, int, Dict[str, Any]]:
    """Rebuild (experiment, seed, manifest) from a ``run.json``."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read manifest {path}: {e}") from None
    try:
        exp = ExperimentConfig.model_validate(manifest["experiment"])
    except KeyError:
        raise ConfigError(f"manifest {path} has no experiment record") from None
    except ValidationError as e:
        raise ConfigError(f"manifest {path}: {e.errors()[0].get('msg', 'invalid experiment')}") from None
    if exp.train.digest() != manifest.get("config_sha256"):
        raise ConfigError(f"manifest {path}: config digest does not match the recorded experiment")
    return exp, int(manifest["seed"]), manifest


def _record_manifest(run_dir: Path, *args, **kwargs) -> None:
    try:
        write_manifest(run_dir, *args, **kwargs)
    except Exception as e:
        logger.warning("Failed recording run manifest: %s", e)


def metrics_frame(path: Path) -> pd.DataFrame:
    """Metrics as a table; the length histogram is spread over ``hist_<i>`` columns."""
    df = pd.DataFrame(read_metrics(path))
    if "length_hist" in df.columns:
        hist = df["length_hist"].apply(lambda h: {i: c for i, c in enumerate(h)} if isinstance(h, list) else {})
        spread = pd.DataFrame(hist.tolist(), index=df.index).add_prefix("hist_")
        df = pd.concat([df.drop(columns=["length_hist"]), spread], axis=1)
    return df


def export_csv(metrics_path: Path, out_dir: Path) -> Dict[str, Path]:
    """Write ``<stem>.csv`` (all records) and ``<stem>_final.csv`` (last record)."""
    df = metrics_frame(metrics_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(metrics_path).stem
    full = out_dir / f"{stem}.csv"
    final = out_dir / f"{stem}_final.csv"
    df.to_csv(full, index=False)
    df.tail(1).to_csv(final, index=False)
    written = {"full": full, "final": final}
    if "seen_success" in df.columns:
        curve = out_dir / f"{stem}_success.csv"
        cols = [c for c in ("update", "seen_success", "holdout_success", "mean_episode_steps") if c in df.columns]
        df.dropna(subset=["seen_success"])[cols].to_csv(curve, index=False)
        written["success"] = curve
    logger.info("Exported %d records from %s to %s", len(df), metrics_path, out_dir)
    return written
