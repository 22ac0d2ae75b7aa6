from __future__ import annotations

from pathlib import Path

import pandas as pd
import pytest

from errors import ConfigError
from experiments.config import parse_config
from experiments.switch_study import DELTA_COLUMNS, REPORT_COLUMNS, cmd_switch_study

BASE = """\
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
  samples_per_epoch: 64
"""

FROM_BASE = BASE + """\
switch:
  base_epochs: 1
  target_epochs: 2
  targets:
    - kind: sync
      n_workers: 2
      batch_size: 4
    - kind: gba
      batch_size: 2
      iota: 1
"""


def test_switching_into_the_same_mode_changes_nothing(tmp_path: Path) -> None:
    study = cmd_switch_study(parse_config(FROM_BASE), tmp_path)

    assert list(study.deltas.columns) == DELTA_COLUMNS
    assert list(study.report.columns) == REPORT_COLUMNS
    same = study.deltas[study.deltas["target"] == "sync(N=2,B=4)"]
    assert len(same) == 4
    assert (same["loss_delta"] == 0.0).all()

    report = study.report.set_index("target")
    assert list(report.index) == ["sync(N=2,B=4)", "gba(M=4,B=2,iota=1)"]
    assert report.loc["gba(M=4,B=2,iota=1)", "global_batch"] == 8
    assert report.loc["sync(N=2,B=4)", "seeds"] == 2
    assert report.loc["sync(N=2,B=4)", "avg_loss_delta"] == 0.0

    assert (tmp_path / "switch_report.csv").exists()
    assert len(pd.read_csv(tmp_path / "switch_deltas.csv")) == 8
    assert (tmp_path / "base-pretrain" / "seed-0" / "checkpoint.json").exists()
    assert (tmp_path / "target-1-gba" / "seed-1" / "summary.json").exists()


def test_targets_resume_at_the_base_checkpoint(tmp_path: Path) -> None:
    study = cmd_switch_study(parse_config(FROM_BASE), tmp_path, write_runs=False)
    gba = study.deltas[study.deltas["target"] == "gba(M=4,B=2,iota=1)"]
    assert sorted(gba["epoch"].unique()) == [1, 2]
    assert not (tmp_path / "base-pretrain").exists()


def test_switching_back_to_the_base_mode(tmp_path: Path) -> None:
    text = BASE + """\
switch:
  direction: to_base
  targets:
    - kind: async
      n_workers: 2
      batch_size: 4
"""
    study = cmd_switch_study(parse_config(text), tmp_path, write_runs=False)
    assert list(study.report["target"]) == ["async(N=2,B=4)->sync(N=2,B=4)"]
    assert len(study.deltas) == 2


def test_study_needs_a_switch_section() -> None:
    with pytest.raises(ConfigError):
        cmd_switch_study(parse_config(BASE))
