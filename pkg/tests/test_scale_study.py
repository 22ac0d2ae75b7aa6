from __future__ import annotations

from pathlib import Path

import pytest

from errors import ConfigError
from experiments.config import parse_config
from experiments.scale_study import SCALE_COLUMNS, cmd_scale_study

CONFIG = """\
model:
  kind: quadratic
  dim: 4
mode:
  kind: gba
  m: 2
  batch_size: 8
run:
  eta: 0.1
  seeds: [0, 1]
data:
  samples_per_epoch: 128
scale:
  variants:
    - kind: gba
      m: 2
      batch_size: 8
    - kind: gba
      m: 4
      batch_size: 4
    - kind: gba
      m: 8
      batch_size: 2
"""


def test_one_row_per_variant_at_a_fixed_global_batch(tmp_path: Path) -> None:
    frame = cmd_scale_study(parse_config(CONFIG), tmp_path, write_runs=True)

    assert list(frame.columns) == SCALE_COLUMNS
    assert list(frame["n_workers"]) == [2, 4, 8]
    assert set(frame["global_batch"]) == {16}
    assert (frame["seeds"] == 2).all()
    # homogeneous unit-time workers: every variant pushes n_workers * B samples per second
    assert list(frame["global_qps"]) == pytest.approx([16.0, 16.0, 16.0])
    assert (tmp_path / "scale_report.csv").exists()
    assert (tmp_path / "variant-2" / "seed-1" / "summary.json").exists()


def test_study_needs_a_scale_section() -> None:
    with pytest.raises(ConfigError):
        cmd_scale_study(parse_config(CONFIG.split("scale:")[0]))
