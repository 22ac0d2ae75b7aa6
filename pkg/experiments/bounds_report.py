# experiments/bounds_report.py
# `bounds` command: caps, floors and rates for the configured quadratic run,
# measured gamma/p0, an envelope check over seeds and the switching-order sweep.
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

from cluster.trace import load_trace
from core import bounds
from core.modes import mode_label, step_semantics
from core.tasks import QuadraticTask
from errors import CapViolationError, ConfigError
from experiments.config import BoundsSection, ExperimentConfig
from experiments.train import train_seed

logger = logging.getLogger(__name__)


@dataclass
class BoundsReport:
    table: pd.DataFrame
    envelope: pd.DataFrame
    check: bounds.EnvelopeCheck | None
    sweep: bounds.SweepResult
    inputs: bounds.BoundInputs

    @property
    def passed(self) -> bool:
        envelope_ok = self.check is None or self.check.passed
        return envelope_ok and self.sweep.violations == 0


def _with_snapshots(config: ExperimentConfig) -> ExperimentConfig:
    output = config.output.model_copy(update={"record_snapshots": True})
    return config.model_copy(update={"output": output})


def cmd_bounds(config: ExperimentConfig, out_dir: str | Path | None = None) -> BoundsReport:
    section = config.bounds or BoundsSection()
    mode = config.build_mode()
    policy = step_semantics(mode)
    sample_task = config.build_task(mode.batch_size, config.run.seeds[0])
    if not isinstance(sample_task, QuadraticTask):
        raise ConfigError("bounds needs the quadratic model (closed-form gradient)", field="model.kind")
    problem = sample_task.problem

    # 0. step-size cap; it only depends on the problem and the mode
    inputs = bounds.bound_inputs_for(
        problem, mode.eta, M=policy.capacity, B_a=mode.batch_size, N_s=policy.capacity, B_s=mode.batch_size,
        N=mode.n_workers, B=mode.batch_size,
    )
    cap = bounds.sync_cap(inputs) if section.kind == "sync" else bounds.async_cap(inputs)
    if mode.eta > cap:
        logger.error(f"❌ eta={mode.eta:g} exceeds the {section.kind} cap {cap:g}")
        raise CapViolationError(f"eta={mode.eta:g} exceeds the {section.kind} step-size cap {cap:g}", cap)

    # 1. runs, one per seed, with snapshots for the gamma estimate
    runs = [train_seed(_with_snapshots(config), seed, mode=mode) for seed in config.run.seeds]
    traces = [run.trace for run in runs]
    if section.trace:
        traces = [load_trace(section.trace)]

    # 2. measured staleness constants, made conservative before use
    gammas = [bounds.estimate_gamma(trace, problem) for trace in traces]
    gamma_hat = max(g.gamma for g in gammas)
    zeta_hat = min(g.zeta for g in gammas)
    p0_hat = min(bounds.estimate_p0(trace) for trace in traces)
    gamma_used = bounds.inflate_gamma(gamma_hat)
    p0_used = bounds.deflate_p0(p0_hat)

    inputs = replace(inputs, gamma=gamma_used, zeta=zeta_hat, p0=p0_used, p1=1.0)

    # 3. envelope against the seed-mean error curve
    curves = [run.loss_curve() for run in runs]
    length = min(len(c) for c in curves)
    errors = np.array([c[:length] for c in curves], dtype=np.float64)
    E0 = float(errors[:, 0].mean())
    curve = bounds.envelope_curve(section.kind, length - 1, E0, inputs, use_rho=section.use_rho)
    check = None
    if errors.shape[0] >= section.min_seeds:
        check = bounds.check_envelope(errors, curve, slack=section.slack, min_seeds=section.min_seeds)
    else:
        logger.warning(f"⚠️ Envelope check skipped: {errors.shape[0]} seeds < {section.min_seeds}")
    sweep = bounds.sweep_switch_orderings(section.sweep_draws, seed=config.run.seeds[0])

    seeds = errors.shape[0]
    stderr = errors.std(axis=0, ddof=1) / np.sqrt(seeds) if seeds > 1 else np.zeros(length)
    envelope = pd.DataFrame({
        "k": np.arange(length), "mean_error": errors.mean(axis=0), "stderr": stderr, "envelope": curve.values,
    })
    table = pd.DataFrame([
        ("mode", mode_label(mode)),
        ("L", inputs.L), ("c", inputs.c), ("sigma", inputs.sigma), ("theta", inputs.theta), ("eta", inputs.eta),
        ("sync_cap", bounds.sync_cap(inputs)), ("async_cap", bounds.async_cap(inputs)),
        ("gamma_hat", gamma_hat), ("gamma_used", gamma_used), ("zeta_hat", zeta_hat),
        ("p0_hat", p0_hat), ("p0_used", p0_used),
        ("gamma_prime", bounds.gamma_prime(gamma_used, p0_used)),
        ("rho", bounds.rho(gamma_used, zeta_hat, p0_used, inputs.p1)),
        ("floor", curve.floor), ("rate", curve.rate), ("E0", E0),
        ("excluded_zero_grad", sum(g.excluded for g in gammas)),
        ("seeds", seeds), ("steps", length - 1),
        ("envelope_check", check.verdict if check else "SKIPPED"),
        ("worst_margin", check.worst_margin if check else np.nan),
        ("worst_step", check.worst_step if check else -1),
        ("sweep_draws", sweep.draws), ("sweep_violations", sweep.violations),
        ("verdict", "PASS" if (check is None or check.passed) and sweep.violations == 0 else "FAIL"),
    ], columns=["quantity", "value"])

    out = Path(out_dir or config.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "bounds_report.csv", index=False)
    envelope.to_csv(out / "envelope.csv", index=False)
    logger.info(f"📦 Bounds report written to {out}")
    return BoundsReport(table=table, envelope=envelope, check=check, sweep=sweep, inputs=inputs)
