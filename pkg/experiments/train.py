# experiments/train.py
# Multi-epoch training driver: one cluster run per epoch, evaluation at each epoch
# boundary, run directory output (trace, metrics, eval, checkpoint, summary).
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from cluster.live import live_run
from cluster.metrics import metrics_frame, summarize_records
from cluster.simulator import EpochCursor
from cluster.simulator import run as sim_run
from cluster.trace import Trace, merge_traces, write_trace
from core.model import ModelParams
from core.modes import (
    GbaMode,
    ModeConfig,
    SyncMode,
    gba_for_global_batch,
    gba_from_sync,
    global_batch,
    mode_label,
    mode_to_dict,
)
from errors import SwitchConfigError
from experiments.checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from experiments.config import ExperimentConfig, GbaSection, dump_config

logger = logging.getLogger(__name__)

EVAL_COLUMNS = ["epoch", "step", "sim_time", "loss", "auc"]


@dataclass
class SeedRun:
    seed: int
    mode: ModeConfig
    trace: Trace
    params: ModelParams
    id_tags: dict[int, int]
    sim_time: float
    next_epoch: int
    initial_metrics: dict = field(default_factory=dict)
    eval_rows: list[dict] = field(default_factory=list)
    data_cursor: int = 0
    resume: EpochCursor | None = None

    @property
    def steps(self) -> int:
        return self.trace.steps

    def eval_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.eval_rows, columns=EVAL_COLUMNS)

    def checkpoint(self) -> Checkpoint:
        token_base = self.resume.server.token_base if self.resume is not None else self.params.global_step
        return Checkpoint(self.params.copy(), self.mode, self.seed, self.next_epoch, self.sim_time, dict(self.id_tags),
                          data_cursor=self.data_cursor, token_base=token_base, resume=self.resume)

    def loss_curve(self) -> list[float]:
        """Loss before the first step followed by the loss after every applied step."""
        losses = [r.get("loss", math.nan) for r in self.trace.of_kind("step")]
        return [self.initial_metrics.get("loss", math.nan), *losses]


def resolve_mode(config: ExperimentConfig, start: Checkpoint | None = None, section=None) -> ModeConfig:
    """Build the configured mode; a GBA target continuing a checkpoint inherits its global batch."""
    section = section or config.mode
    if start is None or not isinstance(section, GbaSection):
        return config.build_mode(section)

    inherited = global_batch(start.mode).G
    if section.m is None:
        if isinstance(start.mode, SyncMode):
            mode = gba_from_sync(SyncMode(n_workers=start.mode.n_workers, batch_size=start.mode.batch_size,
                                          eta=config.run.eta), section.batch_size, section.iota)
        else:
            mode = gba_for_global_batch(inherited, section.batch_size, section.iota, config.run.eta)
        logger.info(f"🔁 M set to {mode.m} to keep the global batch {inherited} of {mode_label(start.mode)}")
        return mode
    mode = config.build_mode(section)
    if global_batch(mode).G != inherited:
        lo = max(inherited // section.batch_size, 1)
        raise SwitchConfigError(
            f"gba global batch {global_batch(mode).G} differs from the checkpoint's {inherited}",
            candidates=(lo, lo + 1) if inherited % section.batch_size else (inherited // section.batch_size,),
        )
    return mode


def _last_time(trace: Trace, default: float) -> float:
    times = [float(r["t"]) for r in trace.records if "t" in r]
    return max(times) if times else default


def train_seed(config: ExperimentConfig, seed: int, *, mode: ModeConfig | None = None,
               start: Checkpoint | None = None, epochs: int | None = None,
               max_steps: int | None = None) -> SeedRun:
    """Train one seed for `epochs` epochs, continuing `start` when given.

    A run stopped by `max_steps` inside an epoch counts that epoch as started; its
    checkpoint resumes at the first batch not handed out, and a simulator run of the
    same mode also picks up the buffered and in-flight gradients.
    """
    mode = mode or resolve_mode(config, start)
    task = config.build_task(mode.batch_size, seed)
    profiles = config.cluster.build_profiles(mode.n_workers)
    epochs = config.run.epochs if epochs is None else epochs
    max_steps = config.run.max_steps if max_steps is None else max_steps

    data_cursor, resume = 0, None
    if start is not None:
        params, id_tags = start.params.copy(), dict(start.id_tags)
        first_epoch, t = start.next_epoch, start.sim_time
        data_cursor, resume = start.data_cursor, start.resume
        if resume is not None and (start.mode != mode or config.run.runner != "sim"):
            logger.warning(f"⚠️ Dropping {len(resume.events)} pending events of {mode_label(start.mode)}; "
                           f"{mode_label(mode)} restarts epoch {first_epoch} at batch {data_cursor}")
            resume = None
        logger.info(f"🔁 Continuing step {params.global_step} as {mode_label(mode)} (seed {seed})")
    else:
        params, id_tags, first_epoch, t = task.initial_params(), {}, 0, 0.0

    initial = task.evaluate(params, max(first_epoch - 1, 0))
    traces: list[Trace] = []
    rows: list[dict] = []
    done = 0
    next_epoch = first_epoch
    for epoch in range(first_epoch, first_epoch + epochs):
        remaining = None if max_steps is None else max_steps - done
        if remaining is not None and remaining <= 0:
            break
        sim_config = config.sim_config(max_steps=remaining)
        kwargs = dict(params=params, epoch=epoch, id_tags=id_tags, t0=t)
        if config.run.runner == "live":
            trace = live_run(task, mode, profiles, sim_config, seed, wall_budget=config.run.wall_budget,
                             batch_offset=data_cursor, **kwargs)
        elif resume is not None:
            trace = sim_run(task, mode, profiles, sim_config, seed, resume=resume, **kwargs)
        else:
            trace = sim_run(task, mode, profiles, sim_config, seed, batch_offset=data_cursor, **kwargs)
        traces.append(trace)
        params, id_tags = trace.params, trace.id_tags
        t = _last_time(trace, t)
        done += trace.steps
        data_cursor = trace.data_cursor or 0
        resume = trace.resume
        next_epoch = epoch if trace.data_cursor is not None else epoch + 1
        metrics = task.evaluate(params, epoch)
        rows.append({"epoch": epoch, "step": params.global_step, "sim_time": t, **metrics})
        logger.info(f"✅ Seed {seed} epoch {epoch}: step {params.global_step}, "
                    + ", ".join(f"{k}={v:.4f}" for k, v in metrics.items()))
        if trace.data_cursor is not None:
            logger.info(f"📦 Step budget reached inside epoch {epoch} at batch {trace.data_cursor}")
            break

    merged = merge_traces(traces)
    merged.params = params
    merged.id_tags = dict(id_tags)
    if merged.records:
        merged.summary = summarize_records(merged.records, n_workers=mode.n_workers)
    return SeedRun(seed=seed, mode=mode, trace=merged, params=params, id_tags=dict(id_tags), sim_time=t,
                   next_epoch=next_epoch, initial_metrics=initial, eval_rows=rows, data_cursor=data_cursor,
                   resume=resume)


def run_summary(config: ExperimentConfig, run: SeedRun) -> dict:
    final = run.eval_rows[-1] if run.eval_rows else {}
    return {
        "name": config.name,
        "seed": run.seed,
        "mode": mode_to_dict(run.mode),
        "mode_label": mode_label(run.mode),
        "global_batch": global_batch(run.mode).G,
        "runner": config.run.runner,
        "steps": run.steps,
        "global_step": run.params.global_step,
        "epochs": len(run.eval_rows),
        "final_loss": final.get("loss", math.nan),
        "final_auc": final.get("auc", math.nan),
        "metrics": run.trace.summary,
    }


def write_run(config: ExperimentConfig, run: SeedRun, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(run.trace, out / "trace.jsonl")
    metrics_frame(run.trace).to_csv(out / "metrics.csv", index=False)
    run.eval_frame().to_csv(out / "eval.csv", index=False)
    checkpoint_save(run.checkpoint(), out / "checkpoint.json")
    with (out / "summary.json").open("w", encoding="utf-8") as fh:
        json.dump(run_summary(config, run), fh, indent=2)
    dump_config(config, out / "config.yaml")
    logger.info(f"📦 Run outputs written to {out}")
    return out


def seed_dir(base: str | Path, seed: int, seeds: list[int]) -> Path:
    return Path(base) if len(seeds) == 1 else Path(base) / f"seed-{seed}"


def cmd_train(config: ExperimentConfig, from_path: str | Path | None = None) -> list[SeedRun]:
    start = checkpoint_load(from_path) if from_path else None
    mode = resolve_mode(config, start)
    if start is not None and isinstance(mode, GbaMode):
        logger.info(f"🔁 Switching {mode_label(start.mode)} -> {mode_label(mode)} at step {start.global_step}")
    runs = []
    for seed in config.run.seeds:
        run = train_seed(config, seed, mode=mode, start=start)
        write_run(config, run, seed_dir(config.output.dir, seed, config.run.seeds))
        runs.append(run)
    return runs
