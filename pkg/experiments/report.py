# experiments/report.py
# Cross-run comparison table: one row per run directory.
from __future__ import annotations

import logging
from pathlib import Path

import pandas as pd

from errors import ArgumentError
from runstore import RUN_COLUMNS, find_runs, summary_row
from utils.helpers import format_staleness

logger = logging.getLogger(__name__)

REPORT_COLUMNS = ["run", "mode", "global_batch", "final_loss", "final_auc", "global_qps", "local_qps_mean",
                  "avg_staleness_max", "dropped"]


def cmd_report(run_dirs: list[str | Path], out_path: str | Path | None = None) -> pd.DataFrame:
    """Throughput and staleness table; each argument may be a run directory or a tree of them."""
    rows = []
    for arg in run_dirs:
        root = Path(arg)
        found = find_runs(root)
        if not found:
            raise ArgumentError(f"no run directories (summary.json) under {root}")
        rows += [summary_row(run_dir, root.parent) for run_dir in found]
    frame = pd.DataFrame(rows, columns=RUN_COLUMNS)
    frame["avg_staleness_max"] = [format_staleness(m, x) for m, x in zip(frame["mean_staleness"], frame["max_staleness"])]
    table = frame[REPORT_COLUMNS]
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_path, index=False)
        logger.info(f"📦 Report with {len(table)} runs written to {out_path}")
    return table
