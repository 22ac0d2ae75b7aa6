from __future__ import annotations

from pathlib import Path

import pandas as pd
import pytest

from errors import ArgumentError
from experiments.config import parse_config
from experiments.report import REPORT_COLUMNS, cmd_report
from experiments.train import cmd_train

CONFIG = """\
model:
  kind: quadratic
  dim: 4
mode:
  kind: gba
  m: 4
  batch_size: 4
  iota: 1
cluster:
  compute_seconds: [1, 1, 1, 4]
run:
  eta: 0.1
  seeds: [0, 1]
data:
  samples_per_epoch: 192
"""


def test_one_row_per_run_directory(tmp_path: Path) -> None:
    cmd_train(parse_config(CONFIG, out=str(tmp_path / "gba")))
    table = cmd_report([tmp_path / "gba"], tmp_path / "report.csv")

    assert list(table.columns) == REPORT_COLUMNS
    assert list(table["run"]) == ["gba/seed-0", "gba/seed-1"]
    assert set(table["mode"]) == {"gba(M=4,B=4,iota=1)"}
    assert (table["global_batch"] == 16).all()
    assert (table["dropped"] > 0).all()
    assert all(cell.endswith(")") for cell in table["avg_staleness_max"])
    assert len(pd.read_csv(tmp_path / "report.csv")) == 2


def test_report_accepts_a_single_run_directory(tmp_path: Path) -> None:
    cmd_train(parse_config(CONFIG, seed=3, out=str(tmp_path / "single")))
    table = cmd_report([tmp_path / "single"])
    assert list(table["run"]) == ["single"]


def test_report_needs_runs(tmp_path: Path) -> None:
    with pytest.raises(ArgumentError):
        cmd_report([tmp_path / "nothing-here"])
