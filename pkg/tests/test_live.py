from __future__ import annotations

import pytest
from scipy.stats import ks_2samp

from cluster.live import LiveRunner, live_run
from cluster.profiles import ComputeSampler, WorkerProfile, constant_profiles, homogeneous_profiles
from cluster.simulator import SimConfig, run
from cluster.trace import check_trace_invariants, recount_dropped, replay_trace
from core.modes import AsyncMode, GbaMode, HopBwMode, SyncMode
from core.tasks import QuadraticTask, make_quadratic_problem
from errors import ArgumentError, ConfigError


def _task(batch_size: int, batches: int) -> QuadraticTask:
    problem = make_quadratic_problem(4, 0.5, 1.0, 1.0, 0.0, batch_size)
    return QuadraticTask(problem, batch_size * batches, seed=0)


class _BrokenTask(QuadraticTask):
    def gradient(self, snapshot, batch):
        if batch.index == 3:
            raise ArgumentError("bad batch")
        return super().gradient(snapshot, batch)


def test_live_gba_consumes_the_whole_epoch() -> None:
    trace = live_run(_task(4, 40), GbaMode(m=4, batch_size=4, iota=2), homogeneous_profiles(4), time_scale=0.0)
    epoch = trace.of_kind("epoch")[-1]
    assert epoch["pulls"] == 40
    assert epoch["applied"] + epoch["dropped"] + epoch["in_buffer"] == epoch["pushed"] == 40
    assert recount_dropped(trace.records, 2) == epoch["dropped"]
    check_trace_invariants(trace)


def test_live_sync_steps_once_per_global_batch() -> None:
    trace = live_run(_task(4, 24), SyncMode(n_workers=3, batch_size=4), constant_profiles([1, 1, 2]),
                     time_scale=0.0)
    assert trace.steps == 8
    assert all(r["surviving"] == 3 for r in trace.of_kind("step"))
    assert trace.params.global_step == 8
    check_trace_invariants(trace)


def test_live_hop_bw_runs_with_backups() -> None:
    trace = live_run(_task(4, 30), HopBwMode(n_workers=3, batch_size=4, b3=1), constant_profiles([1, 1, 3]),
                     time_scale=0.001)
    epoch = trace.of_kind("epoch")[-1]
    assert epoch["steps"] >= 1
    assert epoch["applied"] + epoch["dropped"] + epoch["in_buffer"] == epoch["pushed"]


def test_live_max_steps_stops_the_run() -> None:
    trace = live_run(_task(4, 100), AsyncMode(n_workers=2, batch_size=4), homogeneous_profiles(2),
                     SimConfig(max_steps=5), time_scale=0.0)
    assert trace.steps == 5


def test_live_snapshots_follow_every_step() -> None:
    trace = live_run(_task(4, 12), GbaMode(m=2, batch_size=4), homogeneous_profiles(2),
                     SimConfig(record_snapshots=True), time_scale=0.0)
    assert sorted(trace.snapshots) == list(range(7))


def test_worker_errors_surface_from_run() -> None:
    problem = make_quadratic_problem(4, 0.5, 1.0, 1.0, 0.0, 4)
    task = _BrokenTask(problem, 4 * 20, seed=0)
    with pytest.raises(ArgumentError):
        live_run(task, GbaMode(m=2, batch_size=4), homogeneous_profiles(2), time_scale=0.0)


def test_profile_count_and_ignored_features() -> None:
    with pytest.raises(ConfigError):
        LiveRunner(_task(4, 10), SyncMode(n_workers=3, batch_size=4), homogeneous_profiles(2))
    runner = LiveRunner(_task(4, 10), GbaMode(m=1, batch_size=4), [WorkerProfile(0, failures=((1.0, 2.0),))],
                        time_scale=0.0)
    assert runner.run().steps == 10


@pytest.mark.slow
def test_live_run_matches_the_simulator_statistically() -> None:
    task = _task(4, 240)
    mode = GbaMode(m=4, batch_size=4, iota=1)
    profiles = [WorkerProfile(w, ComputeSampler("lognormal", median=1.0, sigma=0.3)) for w in range(3)]
    profiles.append(WorkerProfile(3, ComputeSampler("lognormal", median=3.0, sigma=0.3)))

    sim = run(task, mode, profiles, seed=3)
    live = live_run(task, mode, profiles, seed=3, time_scale=0.02)

    assert live.steps == sim.steps == 60
    sim_epoch, live_epoch = sim.of_kind("epoch")[-1], live.of_kind("epoch")[-1]
    assert live_epoch["pushed"] == sim_epoch["pushed"] == 240
    assert abs(live_epoch["dropped"] - sim_epoch["dropped"]) / 240 <= 0.05

    for key in ("data_staleness", "staleness"):
        sim_values = [r[key] for r in sim.of_kind("apply", "drop")]
        live_values = [r[key] for r in live.of_kind("apply", "drop")]
        result = ks_2samp(sim_values, live_values)
        assert result.statistic <= 0.15, key
        assert result.pvalue > 0.01, key
    assert live.summary["global_qps"] == pytest.approx(sim.summary["global_qps"], rel=0.3)

    # whatever order the threads produced, it is a valid PS history
    assert len(replay_trace(live, mode, task)) == live.steps
