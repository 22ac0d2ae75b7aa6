from __future__ import annotations

from pathlib import Path

import pytest

from errors import CapViolationError, ConfigError
from experiments.bounds_report import cmd_bounds
from experiments.config import parse_config

CONFIG = """\
model:
  kind: quadratic
  dim: 4
  sigma: 0.5
mode:
  kind: sync
  n_workers: 2
  batch_size: 4
run:
  eta: 0.1
  seeds: [0, 1]
data:
  samples_per_epoch: 400
bounds:
  kind: sync
  sweep_draws: 50
"""


def test_sync_report_with_too_few_seeds_skips_the_envelope(tmp_path: Path) -> None:
    report = cmd_bounds(parse_config(CONFIG), tmp_path)
    table = dict(zip(report.table["quantity"], report.table["value"]))

    assert report.check is None
    assert table["envelope_check"] == "SKIPPED"
    assert table["gamma_hat"] == 0.0
    assert table["p0_hat"] == 1.0
    assert table["p0_used"] == pytest.approx(1.0 / 1.2)
    assert table["steps"] == 50
    assert report.sweep.violations == 0
    assert report.passed
    assert list(report.envelope.columns) == ["k", "mean_error", "stderr", "envelope"]
    assert len(report.envelope) == 51
    assert report.envelope["envelope"].iloc[0] == pytest.approx(report.envelope["mean_error"].iloc[0])
    assert (tmp_path / "bounds_report.csv").exists()
    assert (tmp_path / "envelope.csv").exists()


def test_step_size_over_the_cap_is_refused(tmp_path: Path) -> None:
    with pytest.raises(CapViolationError):
        cmd_bounds(parse_config(CONFIG.replace("eta: 0.1", "eta: 5.0")), tmp_path)


def test_bounds_need_the_quadratic_model(tmp_path: Path) -> None:
    text = CONFIG.replace("kind: quadratic\n  dim: 4\n  sigma: 0.5", "kind: logistic-ctr")
    text = text.replace("  samples_per_epoch: 400\n", "  num_samples: 800\n  days: 1\n  vocab: 50\n")
    with pytest.raises(ConfigError):
        cmd_bounds(parse_config(text), tmp_path)
