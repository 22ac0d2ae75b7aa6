# runstore.py
# Reading run directories (summary.json + CSVs) back into pandas frames.
import json
import logging
import math
from pathlib import Path

import pandas as pd

from cluster.metrics import staleness_table
from cluster.trace import load_trace

logger = logging.getLogger(__name__)

RUN_COLUMNS = ["run", "path", "mode", "global_batch", "seed", "steps", "final_loss", "final_auc", "global_qps",
               "local_qps_mean", "mean_staleness", "max_staleness", "dropped"]


def find_runs(root: str | Path) -> list[Path]:
    """Every directory under `root` holding a summary.json, sorted by path."""
    root = Path(root)
    if not root.exists():
        return []
    return sorted(p.parent for p in root.rglob("summary.json"))


def read_summary(run_dir: str | Path) -> dict:
    with (Path(run_dir) / "summary.json").open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _mean(values) -> float:
    values = [float(v) for v in values]
    return sum(values) / len(values) if values else math.nan


def summary_row(run_dir: Path, root: Path | None = None) -> dict:
    summary = read_summary(run_dir)
    metrics = summary.get("metrics", {})
    name = str(run_dir.relative_to(root)) if root is not None and run_dir != root else run_dir.name
    return {
        "run": name,
        "path": str(run_dir),
        "mode": summary.get("mode_label"),
        "global_batch": summary.get("global_batch"),
        "seed": summary.get("seed"),
        "steps": summary.get("steps"),
        "final_loss": summary.get("final_loss"),
        "final_auc": summary.get("final_auc"),
        "global_qps": metrics.get("global_qps"),
        "local_qps_mean": _mean(metrics.get("local_qps", {}).values()),
        "mean_staleness": metrics.get("mean_staleness"),
        "max_staleness": metrics.get("max_staleness"),
        "dropped": metrics.get("dropped"),
    }


def runs_frame(root: str | Path) -> pd.DataFrame:
    root = Path(root)
    rows = []
    for run_dir in find_runs(root):
        try:
            rows.append(summary_row(run_dir, root))
        except (OSError, json.JSONDecodeError) as exc:
            logger.warning(f"⚠️ Skipping unreadable run {run_dir}: {exc}")
    return pd.DataFrame(rows, columns=RUN_COLUMNS)


def read_metrics(run_dir: str | Path) -> pd.DataFrame:
    return pd.read_csv(Path(run_dir) / "metrics.csv")


def read_eval(run_dir: str | Path) -> pd.DataFrame:
    return pd.read_csv(Path(run_dir) / "eval.csv")


def read_staleness(run_dir: str | Path) -> pd.DataFrame:
    path = Path(run_dir) / "trace.jsonl"
    if not path.exists():
        return pd.DataFrame(columns=["staleness", "count", "fraction"])
    return staleness_table(load_trace(path))
