from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from core.model import ModelParams
from core.modes import GbaMode, SyncMode
from errors import SwitchConfigError
from experiments.checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from experiments.config import parse_config
from experiments.train import cmd_train, resolve_mode, seed_dir, train_seed, write_run

QUAD = """\
name: quad
model:
  kind: quadratic
  dim: 4
mode:
  kind: sync
  n_workers: 2
  batch_size: 4
run:
  eta: 0.1
  epochs: 2
data:
  samples_per_epoch: 64
"""

CTR_GBA = """\
name: ctr
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
  kind: gba
  m: 4
  batch_size: 8
  iota: 1
cluster:
  default_profile:
    compute:
      kind: lognormal
      median: 1.0
      sigma: 0.5
run:
  eta: 0.5
  epochs: 2
"""


def _sync_checkpoint(n_workers: int, batch_size: int) -> Checkpoint:
    return Checkpoint(ModelParams(np.zeros(4), global_step=10), SyncMode(n_workers=n_workers, batch_size=batch_size),
                      seed=0, next_epoch=1, sim_time=10.0)


def test_metrics_have_one_row_per_step(tmp_path: Path) -> None:
    config = parse_config(QUAD)
    run = train_seed(config, 0)
    assert run.steps == 16
    assert run.params.global_step == 16
    assert [row["epoch"] for row in run.eval_rows] == [0, 1]
    assert run.next_epoch == 2
    assert len(run.loss_curve()) == 17

    out = write_run(config, run, tmp_path / "run")
    for name in ("trace.jsonl", "metrics.csv", "eval.csv", "checkpoint.json", "summary.json", "config.yaml"):
        assert (out / name).exists()
    metrics = pd.read_csv(out / "metrics.csv")
    assert len(metrics) == run.steps
    assert list(metrics["step"]) == list(range(1, 17))
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["mode_label"] == "sync(N=2,B=4)"
    assert summary["global_batch"] == 8
    assert summary["steps"] == 16


def test_max_steps_is_a_budget_across_epochs() -> None:
    config = parse_config(QUAD)
    run = train_seed(config, 0, max_steps=11)
    assert run.steps == 11
    assert len(run.eval_rows) == 2
    # Stopped inside epoch 1: the checkpoint resumes there, not at epoch 2.
    assert run.next_epoch == 1
    assert 0 < run.data_cursor < 16
    ckpt = run.checkpoint()
    assert ckpt.mid_epoch and ckpt.resume is run.resume
    assert ckpt.token_base == 8


def test_switching_mid_epoch_starts_at_the_saved_data_cursor(tmp_path: Path) -> None:
    config = parse_config(QUAD)
    base = train_seed(config, 0, max_steps=11)
    ckpt = checkpoint_load(checkpoint_save(base.checkpoint(), tmp_path / "checkpoint.json"))
    assert ckpt.mid_epoch and ckpt.data_cursor == base.data_cursor

    gba = GbaMode(m=2, batch_size=4, eta=0.1)
    branch = train_seed(config, 0, mode=gba, start=ckpt, epochs=1)
    pulls = branch.trace.of_kind("pull")
    assert pulls[0]["token"] == 11
    assert min(r["batch"] for r in pulls) == ckpt.data_cursor
    assert len({r["batch"] for r in pulls}) == 16 - ckpt.data_cursor
    assert branch.next_epoch == 2 and branch.data_cursor == 0


def test_gba_inherits_m_from_a_sync_checkpoint() -> None:
    text = QUAD.replace("kind: sync\n  n_workers: 2\n  batch_size: 4", "kind: gba\n  batch_size: 12800")
    config = parse_config(text)
    mode = resolve_mode(config, _sync_checkpoint(32, 40_000))
    assert mode == GbaMode(m=100, batch_size=12_800, eta=0.1)


def test_gba_switch_needs_an_exact_global_batch() -> None:
    text = QUAD.replace("kind: sync\n  n_workers: 2\n  batch_size: 4", "kind: gba\n  batch_size: 12801")
    with pytest.raises(SwitchConfigError) as info:
        resolve_mode(parse_config(text), _sync_checkpoint(32, 40_000))
    assert info.value.candidates == (99, 100)

    text = QUAD.replace("kind: sync\n  n_workers: 2\n  batch_size: 4", "kind: gba\n  m: 99\n  batch_size: 12800")
    with pytest.raises(SwitchConfigError):
        resolve_mode(parse_config(text), _sync_checkpoint(32, 40_000))


@pytest.mark.parametrize("text", [QUAD, CTR_GBA], ids=["quadratic-sync", "ctr-gba"])
def test_resumed_run_matches_a_straight_run(tmp_path: Path, text: str) -> None:
    config = parse_config(text)
    straight = train_seed(config, 3, epochs=2)

    first = train_seed(config, 3, epochs=1)
    path = checkpoint_save(first.checkpoint(), tmp_path / "checkpoint.json")
    resumed = train_seed(config, 3, start=checkpoint_load(path), epochs=1)

    assert resumed.params.global_step == straight.params.global_step
    assert resumed.params.dense.tobytes() == straight.params.dense.tobytes()
    assert sorted(resumed.params.embeddings.entries) == sorted(straight.params.embeddings.entries)
    for fid, value in straight.params.embeddings.entries.items():
        assert resumed.params.embeddings.entries[fid].tobytes() == value.tobytes()
    assert resumed.id_tags == straight.id_tags
    assert resumed.eval_rows[-1] == straight.eval_rows[-1]


def test_cmd_train_writes_one_directory_per_seed(tmp_path: Path) -> None:
    config = parse_config(QUAD.replace("  epochs: 2\n", "  epochs: 1\n  seeds: [0, 1]\n"), out=str(tmp_path))
    runs = cmd_train(config)
    assert [run.seed for run in runs] == [0, 1]
    assert (tmp_path / "seed-0" / "summary.json").exists()
    assert (tmp_path / "seed-1" / "checkpoint.json").exists()
    assert seed_dir(tmp_path, 5, [5]) == tmp_path


def test_cmd_train_switches_from_a_checkpoint(tmp_path: Path) -> None:
    base = parse_config(QUAD.replace("  epochs: 2\n", "  epochs: 1\n"), out=str(tmp_path / "base"))
    cmd_train(base)

    text = QUAD.replace("kind: sync\n  n_workers: 2\n  batch_size: 4", "kind: gba\n  batch_size: 2")
    switched = parse_config(text.replace("  epochs: 2\n", "  epochs: 1\n"), out=str(tmp_path / "gba"))
    [run] = cmd_train(switched, from_path=tmp_path / "base" / "checkpoint.json")
    assert run.mode == GbaMode(m=4, batch_size=2, eta=0.1)
    assert run.params.global_step > 8
    assert run.eval_rows[0]["epoch"] == 1
