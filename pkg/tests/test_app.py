from __future__ import annotations

from pathlib import Path

import pytest
from streamlit.testing.v1 import AppTest

from components.run_overview import runs_table
from experiments.config import parse_config
from experiments.train import cmd_train
from runstore import runs_frame

APP = str(Path(__file__).resolve().parents[1] / "app.py")

CONFIG = """\
model:
  kind: quadratic
  dim: 4
mode:
  kind: gba
  m: 2
  batch_size: 4
run:
  eta: 0.1
  seeds: [0, 1]
data:
  samples_per_epoch: 64
"""


def _runs(root: Path) -> Path:
    cmd_train(parse_config(CONFIG, out=str(root / "gba")))
    return root


def test_runs_table_formats_columns(tmp_path: Path) -> None:
    table = runs_table(runs_frame(_runs(tmp_path)))
    assert list(table["Run"]) == ["gba/seed-0", "gba/seed-1"]
    assert set(table["Status"]) == {"🟩 Clean"}
    assert set(table["Global QPS"]) == {"8.00"}


def test_app_lists_and_inspects_runs(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("GBALAB_RUNS_DIR", str(_runs(tmp_path)))
    at = AppTest.from_file(APP, default_timeout=30).run()

    assert not at.exception
    assert at.title[0].value == "gbalab results"
    assert len(at.dataframe) >= 1
    assert at.selectbox(key="selected_run").value == "gba/seed-0"
    assert at.subheader[-1].value == "gba(M=2,B=4,iota=inf) (seed 0)"

    at.selectbox(key="selected_run").select("gba/seed-1").run()
    assert at.subheader[-1].value == "gba(M=2,B=4,iota=inf) (seed 1)"


def test_app_warns_without_runs(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    monkeypatch.setenv("GBALAB_RUNS_DIR", str(tmp_path / "empty"))
    at = AppTest.from_file(APP, default_timeout=30).run()
    assert not at.exception
    assert "No runs found" in at.warning[0].value
