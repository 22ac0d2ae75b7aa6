# experiments/scale_study.py
# Same mode family at a fixed global batch, different worker counts.
from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from core.modes import global_batch, mode_label
from errors import ConfigError
from experiments.config import ExperimentConfig
from experiments.train import train_seed, write_run

logger = logging.getLogger(__name__)

SCALE_COLUMNS = ["variant", "mode", "n_workers", "global_batch", "seeds", "final_loss", "final_auc", "global_qps",
                 "mean_staleness", "max_staleness", "dropped"]


def cmd_scale_study(config: ExperimentConfig, out_dir: str | Path | None = None, write_runs: bool = False) -> pd.DataFrame:
    if config.scale is None:
        raise ConfigError("scale-study needs a `scale` section", field="scale")
    out = Path(out_dir or config.output.dir)
    modes = [config.build_mode(section) for section in config.scale.variants]
    sizes = {global_batch(m).G for m in modes}
    if len(sizes) > 1:
        logger.warning(f"⚠️ Scale variants do not share one global batch: {sorted(sizes)}")

    rows = []
    for i, mode in enumerate(modes):
        finals, aucs, qps, mean_st, max_st, dropped = [], [], [], [], [], []
        for seed in config.run.seeds:
            run = train_seed(config, seed, mode=mode)
            if write_runs:
                write_run(config, run, out / f"variant-{i}" / f"seed-{seed}")
            final = run.eval_rows[-1] if run.eval_rows else {}
            summary = run.trace.summary
            finals.append(final.get("loss", math.nan))
            aucs.append(final.get("auc", math.nan))
            qps.append(summary.get("global_qps", math.nan))
            mean_st.append(summary.get("mean_staleness", math.nan))
            max_st.append(summary.get("max_staleness", 0))
            dropped.append(summary.get("dropped", 0))
        rows.append({
            "variant": i, "mode": mode_label(mode), "n_workers": mode.n_workers,
            "global_batch": global_batch(mode).G, "seeds": len(config.run.seeds),
            "final_loss": float(np.mean(finals)), "final_auc": float(np.mean(aucs)),
            "global_qps": float(np.mean(qps)), "mean_staleness": float(np.mean(mean_st)),
            "max_staleness": int(max(max_st)), "dropped": float(np.mean(dropped)),
        })
        logger.info(f"✅ Variant {i} {mode_label(mode)} done")

    frame = pd.DataFrame(rows, columns=SCALE_COLUMNS)
    out.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out / "scale_report.csv", index=False)
    logger.info(f"📦 Scale study written to {out / 'scale_report.csv'}")
    return frame
