# experiments/gen_data.py
# `gen-data`: export the configured synthetic data for inspection outside the lab.
from __future__ import annotations

import logging
from pathlib import Path

import pandas as pd

from core import datagen
from core.tasks import CtrTask, QuadraticTask
from experiments.config import ExperimentConfig

logger = logging.getLogger(__name__)


def cmd_gen_data(config: ExperimentConfig, out_dir: str | Path | None = None) -> dict[str, Path]:
    out = Path(out_dir or config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    mode = config.build_mode()
    task = config.build_task(mode.batch_size, config.run.seeds[0])
    written: dict[str, Path] = {}

    if isinstance(task, QuadraticTask):
        problem = task.problem
        path = out / "quadratic_problem.csv"
        pd.DataFrame({"a": problem.a, "w_star": problem.w_star}).to_csv(path, index_label="coordinate")
        written["problem"] = path
        stream = datagen.quad_stream(problem, task.batches_per_epoch, task.seed, 0)
        path = out / "quad_stream.csv"
        pd.DataFrame([{"index": b.index, "sub_seed": b.sub_seed, "size": b.size} for b in stream]).to_csv(path, index=False)
        written["stream"] = path
    elif isinstance(task, CtrTask):
        written["samples"] = datagen.export_ctr_text(task.samples, out / "ctr_samples.tsv")
        batches = datagen.gen_ctr_dataset(task.dataset, task.dataset.truth_seed, mode.batch_size)
        frame = datagen.id_rank_frame(datagen.id_histogram(batches), total_batches=len(batches))
        path = out / "id_histogram.csv"
        frame.to_csv(path, index=False)
        written["id_histogram"] = path
    logger.info(f"📦 Data written to {out}: {', '.join(p.name for p in written.values())}")
    return written
