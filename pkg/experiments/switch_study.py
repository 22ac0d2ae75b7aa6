# experiments/switch_study.py
# Mode-switch study: train a base mode, branch into each target from the same
# checkpoint and compare per-epoch evaluation against the continued base.
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import pandas as pd

from core.modes import global_batch, mode_label
from errors import ConfigError
from experiments.checkpoint import Checkpoint
from experiments.config import ExperimentConfig
from experiments.train import SeedRun, resolve_mode, train_seed, write_run

logger = logging.getLogger(__name__)

DELTA_COLUMNS = ["target", "seed", "epoch", "step", "loss", "reference_loss", "loss_delta", "auc",
                 "reference_auc", "auc_delta"]
REPORT_COLUMNS = ["target", "global_batch", "seeds", "first_loss_delta", "last_loss_delta", "avg_loss_delta",
                  "median_first_loss_delta", "first_auc_delta", "last_auc_delta", "avg_auc_delta"]


@dataclass
class SwitchStudy:
    deltas: pd.DataFrame
    report: pd.DataFrame


def epoch_deltas(target: SeedRun, reference: SeedRun, label: str) -> list[dict]:
    """Row per evaluated epoch: target metric minus the reference's at the same epoch."""
    ref = {row["epoch"]: row for row in reference.eval_rows}
    rows = []
    for row in target.eval_rows:
        base = ref.get(row["epoch"])
        if base is None:
            continue
        rows.append({
            "target": label, "seed": target.seed, "epoch": row["epoch"], "step": row["step"],
            "loss": row["loss"], "reference_loss": base["loss"], "loss_delta": row["loss"] - base["loss"],
            "auc": row.get("auc"), "reference_auc": base.get("auc"),
            "auc_delta": (row.get("auc", float("nan")) - base.get("auc", float("nan"))),
        })
    return rows


def summarize_deltas(deltas: pd.DataFrame, batches: dict[str, int]) -> pd.DataFrame:
    """First-epoch, last-epoch and average deltas per target, averaged over seeds."""
    rows = []
    for label, group in deltas.groupby("target", sort=False):
        per_seed = group.sort_values("epoch").groupby("seed")
        first = per_seed.first()
        last = per_seed.last()
        avg = per_seed[["loss_delta", "auc_delta"]].mean()
        rows.append({
            "target": label,
            "global_batch": batches.get(label),
            "seeds": int(first.shape[0]),
            "first_loss_delta": float(first["loss_delta"].mean()),
            "last_loss_delta": float(last["loss_delta"].mean()),
            "avg_loss_delta": float(avg["loss_delta"].mean()),
            "median_first_loss_delta": float(first["loss_delta"].median()),
            "first_auc_delta": float(first["auc_delta"].mean()),
            "last_auc_delta": float(last["auc_delta"].mean()),
            "avg_auc_delta": float(avg["auc_delta"].mean()),
        })
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def _slug(index: int, label: str) -> str:
    return f"target-{index}-{label.split('(')[0]}"


def _write(config: ExperimentConfig, run: SeedRun, out: Path | None, name: str) -> None:
    if out is not None:
        write_run(config, run, out / name / f"seed-{run.seed}")


def _from_base(config: ExperimentConfig, seed: int, out: Path | None) -> tuple[list[dict], dict[str, int]]:
    study = config.switch
    base_mode = config.build_mode()
    base = train_seed(config, seed, mode=base_mode, epochs=study.base_epochs)
    ckpt: Checkpoint = base.checkpoint()
    reference = train_seed(config, seed, mode=base_mode, start=ckpt, epochs=study.target_epochs)
    _write(config, base, out, "base-pretrain")
    _write(config, reference, out, "base-continued")

    rows: list[dict] = []
    batches: dict[str, int] = {}
    for i, section in enumerate(study.targets):
        mode = resolve_mode(config, ckpt, section)
        label = mode_label(mode)
        logger.info(f"🔁 Seed {seed}: {mode_label(base_mode)} -> {label} at step {ckpt.global_step}")
        target = train_seed(config, seed, mode=mode, start=ckpt, epochs=study.target_epochs)
        _write(config, target, out, _slug(i, label))
        rows += epoch_deltas(target, reference, label)
        batches[label] = global_batch(mode).G
    return rows, batches


def _to_base(config: ExperimentConfig, seed: int, out: Path | None) -> tuple[list[dict], dict[str, int]]:
    study = config.switch
    base_section = config.mode
    rows: list[dict] = []
    batches: dict[str, int] = {}
    for i, section in enumerate(study.targets):
        pre_mode = config.build_mode(section)
        pre = train_seed(config, seed, mode=pre_mode, epochs=study.base_epochs)
        ckpt = pre.checkpoint()
        base_mode = resolve_mode(config, ckpt, base_section)
        # reference: the pre-training mode continued, target: switched back into the base mode
        reference = train_seed(config, seed, mode=pre_mode, start=ckpt, epochs=study.target_epochs)
        switched = train_seed(config, seed, mode=base_mode, start=ckpt, epochs=study.target_epochs)
        label = f"{mode_label(pre_mode)}->{mode_label(base_mode)}"
        logger.info(f"🔁 Seed {seed}: {label} at step {ckpt.global_step}")
        _write(config, reference, out, _slug(i, mode_label(pre_mode)) + "-continued")
        _write(config, switched, out, _slug(i, mode_label(pre_mode)) + "-switched")
        rows += epoch_deltas(switched, reference, label)
        batches[label] = global_batch(base_mode).G
    return rows, batches


def cmd_switch_study(config: ExperimentConfig, out_dir: str | Path | None = None,
                     write_runs: bool = True) -> SwitchStudy:
    if config.switch is None:
        raise ConfigError("switch-study needs a `switch` section", field="switch")
    out = Path(out_dir or config.output.dir)
    runs_out = out if write_runs else None
    branch = _to_base if config.switch.direction == "to_base" else _from_base

    rows: list[dict] = []
    batches: dict[str, int] = {}
    for seed in config.run.seeds:
        seed_rows, seed_batches = branch(config, seed, runs_out)
        rows += seed_rows
        batches.update(seed_batches)

    deltas = pd.DataFrame(rows, columns=DELTA_COLUMNS)
    report = summarize_deltas(deltas, batches)
    out.mkdir(parents=True, exist_ok=True)
    deltas.to_csv(out / "switch_deltas.csv", index=False)
    report.to_csv(out / "switch_report.csv", index=False)
    logger.info(f"📦 Switch study ({config.switch.direction}) written to {out}")
    return SwitchStudy(deltas=deltas, report=report)
