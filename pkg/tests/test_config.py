from __future__ import annotations

import math
from pathlib import Path

import pytest

from core.modes import GbaMode, HopBwMode, SyncMode
from core.tasks import CtrTask, QuadraticTask
from errors import ConfigError
from experiments.config import dump_config, load_config, parse_config

BASE = """\
name: tiny
model:
  kind: quadratic
  dim: 4
mode:
  kind: sync
  n_workers: 4
  batch_size: 8
run:
  eta: 0.05
data:
  samples_per_epoch: 640
"""


def test_parse_builds_mode_task_and_profiles() -> None:
    config = parse_config(BASE)
    mode = config.build_mode()
    assert mode == SyncMode(n_workers=4, batch_size=8, eta=0.05)
    task = config.build_task(mode.batch_size, seed=0)
    assert isinstance(task, QuadraticTask)
    assert task.batches_per_epoch == 80
    profiles = config.cluster.build_profiles(4)
    assert [p.worker_id for p in profiles] == [0, 1, 2, 3]


def test_unknown_key_reports_field_and_line() -> None:
    text = BASE.replace("  batch_size: 8\n", "  batch_size: 8\n  bogus: 1\n")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "mode.bogus"
    assert info.value.line == 9


def test_invalid_value_reports_its_line() -> None:
    text = BASE.replace("n_workers: 4", "n_workers: 0")
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == "mode.n_workers"
    assert info.value.line == 7


def test_broken_yaml_is_a_config_error() -> None:
    with pytest.raises(ConfigError) as info:
        parse_config("model: [unclosed\nmode: {}\n")
    assert info.value.line is not None
    with pytest.raises(ConfigError):
        parse_config("- just\n- a list\n")


def test_mode_override_merges_or_replaces() -> None:
    merged = parse_config(BASE, mode_override={"n_workers": 2})
    assert merged.build_mode() == SyncMode(n_workers=2, batch_size=8, eta=0.05)

    replaced = parse_config(BASE, mode_override="{kind: gba, m: 8, batch_size: 4, iota: 2}")
    assert replaced.build_mode() == GbaMode(m=8, batch_size=4, iota=2.0, eta=0.05)

    with pytest.raises(ConfigError):
        parse_config(BASE, mode_override="[1, 2]")


def test_seed_and_output_overrides() -> None:
    config = parse_config(BASE, seed=7, out="elsewhere")
    assert config.run.seeds == [7]
    assert config.output.dir == "elsewhere"


def test_iota_accepts_inf_and_dumps_it_back(tmp_path: Path) -> None:
    text = BASE.replace("kind: sync\n  n_workers: 4", "kind: gba\n  m: 4\n  iota: inf")
    config = parse_config(text)
    assert math.isinf(config.mode.iota)

    path = dump_config(config, tmp_path / "out" / "config.yaml")
    assert "iota: inf" in path.read_text(encoding="utf-8")
    assert math.isinf(load_config(path).build_mode().iota)


def test_gba_without_m_needs_a_checkpoint() -> None:
    text = BASE.replace("kind: sync\n  n_workers: 4", "kind: gba")
    config = parse_config(text)
    with pytest.raises(ConfigError):
        config.build_mode()


def test_hop_bw_backups_must_leave_a_worker() -> None:
    with pytest.raises(ConfigError):
        parse_config(BASE, mode_override={"kind": "hop-bw", "n_workers": 3, "batch_size": 4, "b3": 3})
    config = parse_config(BASE, mode_override={"kind": "hop-bw", "n_workers": 3, "batch_size": 4, "b3": 1})
    assert config.build_mode() == HopBwMode(n_workers=3, batch_size=4, b3=1, eta=0.05)


def test_compute_shorthand_and_profile_counts() -> None:
    config = parse_config(BASE + "cluster:\n  compute_seconds: [1, 1, 1, 4]\n")
    profiles = config.cluster.build_profiles(4)
    assert [p.compute.seconds for p in profiles] == [1.0, 1.0, 1.0, 4.0]
    with pytest.raises(ConfigError):
        config.cluster.build_profiles(3)


def test_ctr_model_builds_a_ctr_task() -> None:
    text = """\
model:
  kind: logistic-ctr
  dense_dim: 4
  embed_dim: 2
data:
  num_samples: 1600
  days: 2
  vocab: 100
  eval_fraction: 0.2
mode:
  kind: async
  n_workers: 2
  batch_size: 8
"""
    config = parse_config(text)
    task = config.build_task(8, seed=0)
    assert isinstance(task, CtrTask)
    assert task.batches_per_epoch == task.dataset.train_size // 8


def test_missing_file_is_a_config_error(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")
