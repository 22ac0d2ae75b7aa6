from __future__ import annotations

import numpy as np
import pytest

from cluster.profiles import ComputeSampler, WorkerProfile, constant_profiles, homogeneous_profiles
from cluster.simulator import SimConfig, run
from cluster.trace import check_trace_invariants, recount_dropped
from core.modes import AsyncMode, BspMode, GbaMode, HopBsMode, HopBwMode, SyncMode
from core.tasks import QuadraticTask, make_quadratic_problem
from errors import ConfigError, DeadlockError


def _task(batch_size: int, batches: int, seed: int = 0, sigma: float = 1.0) -> QuadraticTask:
    problem = make_quadratic_problem(4, 0.5, 1.0, sigma, 0.0, batch_size)
    return QuadraticTask(problem, batch_size * batches, seed)


def _dense_trajectory(trace) -> np.ndarray:
    return np.array([trace.snapshots[k] for k in sorted(trace.snapshots)])


def test_same_seed_gives_identical_traces() -> None:
    mode = GbaMode(m=3, batch_size=4, iota=1, eta=0.1)
    profiles = [WorkerProfile(w, ComputeSampler("lognormal", median=1.0, sigma=0.5)) for w in range(3)]
    first = run(_task(4, 60), mode, profiles, seed=7)
    second = run(_task(4, 60), mode, profiles, seed=7)
    assert first.records == second.records
    np.testing.assert_array_equal(first.params.dense, second.params.dense)
    third = run(_task(4, 60), mode, profiles, seed=8)
    assert first.records != third.records


def test_gba_with_homogeneous_workers_equals_sync() -> None:
    config = SimConfig(max_steps=50, record_snapshots=True)
    sync = run(_task(16, 400), SyncMode(n_workers=4, batch_size=16, eta=0.1), homogeneous_profiles(4), config)
    gba = run(_task(16, 400), GbaMode(m=4, batch_size=16, eta=0.1), homogeneous_profiles(4), config)
    assert sync.steps == gba.steps == 50
    np.testing.assert_allclose(_dense_trajectory(gba), _dense_trajectory(sync), rtol=0, atol=1e-12)


@pytest.mark.parametrize("seconds, latency", [([1, 1, 1], 0.0), ([1, 2, 5], 0.0), ([1, 2, 5], 0.5)])
def test_hop_bs_with_zero_bound_equals_sync(seconds, latency) -> None:
    config = SimConfig(max_steps=30, record_snapshots=True, push_latency=latency)
    n = len(seconds)
    sync = run(_task(8, 200), SyncMode(n_workers=n, batch_size=8, eta=0.1), constant_profiles(seconds), config)
    hop = run(_task(8, 200), HopBsMode(n_workers=n, batch_size=8, b1=0, eta=0.1), constant_profiles(seconds), config)
    np.testing.assert_array_equal(_dense_trajectory(hop), _dense_trajectory(sync))

    pulls = [(r["worker"], r["pull_step"]) for r in hop.of_kind("pull")]
    assert pulls == [(r["worker"], r["pull_step"]) for r in sync.of_kind("pull")]
    assert len(pulls) == len(set(pulls))
    assert hop.of_kind("epoch")[-1]["max_version_gap"] == 0


def test_hop_bs_gap_stays_within_the_bound_under_latency() -> None:
    config = SimConfig(max_steps=40, push_latency=0.7)
    trace = run(_task(8, 300), HopBsMode(n_workers=3, batch_size=8, b1=2, eta=0.1), constant_profiles([1, 1, 6]),
                config)
    gaps = [r["gap"] for r in trace.of_kind("pull")]
    assert max(gaps) <= 2
    assert trace.of_kind("epoch")[-1]["max_version_gap"] <= 2


def test_bsp_with_b2_one_equals_async() -> None:
    config = SimConfig(max_steps=40, record_snapshots=True)
    profiles = constant_profiles([1, 1.5, 3])
    asyn = run(_task(8, 200), AsyncMode(n_workers=3, batch_size=8, eta=0.1), profiles, config)
    bsp = run(_task(8, 200), BspMode(n_workers=3, batch_size=8, b2=1, eta=0.1), profiles, config)
    np.testing.assert_array_equal(_dense_trajectory(bsp), _dense_trajectory(asyn))


def test_straggler_gates_sync_but_not_gba() -> None:
    profiles = constant_profiles([1, 1, 1, 4])
    config = SimConfig(max_steps=100)
    sync = run(_task(8, 1000), SyncMode(n_workers=4, batch_size=8), profiles, config)
    gba = run(_task(8, 1000), GbaMode(m=4, batch_size=8), profiles, config)
    assert sync.summary["global_qps"] == pytest.approx(8.0)
    assert gba.summary["global_qps"] == pytest.approx(26.0, rel=0.02)
    assert gba.summary["global_qps"] >= 2.4 * sync.summary["global_qps"]
    assert gba.summary["local_qps"]["3"] == pytest.approx(2.0, rel=0.05)


def test_hop_bw_cancels_the_straggler_every_step() -> None:
    trace = run(_task(8, 400), HopBwMode(n_workers=4, batch_size=8, b3=1), constant_profiles([1, 1, 1, 4]),
                SimConfig(max_steps=10))
    epoch = trace.of_kind("epoch")[-1]
    assert trace.steps == 10
    assert epoch["cancelled"] == 10
    assert all(r["worker"] == 3 for r in trace.of_kind("cancel"))
    assert {r["worker"] for r in trace.of_kind("apply")} == {0, 1, 2}
    assert trace.summary["dropped"] == 10


def test_staleness_filter_drops_match_brute_force_recount() -> None:
    mode = GbaMode(m=4, batch_size=8, iota=1)
    trace = run(_task(8, 600), mode, constant_profiles([1, 1, 1, 4]))
    epoch = trace.of_kind("epoch")[-1]
    assert epoch["dropped"] > 0
    assert recount_dropped(trace.records, mode.iota) == epoch["dropped"]
    check_trace_invariants(trace)


def test_max_steps_and_data_exhaustion_end_the_epoch() -> None:
    mode = GbaMode(m=2, batch_size=4)
    assert run(_task(4, 100), mode, homogeneous_profiles(2), SimConfig(max_steps=7)).steps == 7
    full = run(_task(4, 9), mode, homogeneous_profiles(2))
    assert full.steps == 4
    assert full.of_kind("epoch")[-1]["in_buffer"] == 1


def test_tokens_continue_from_the_starting_global_step() -> None:
    task = _task(4, 20)
    first = run(task, GbaMode(m=2, batch_size=4), homogeneous_profiles(2))
    params = first.params
    assert params.global_step == 10
    second = run(task, GbaMode(m=2, batch_size=4), homogeneous_profiles(2), params=params, epoch=1, t0=10.0)
    pulls = second.of_kind("pull")
    assert pulls[0]["token"] == 10
    assert pulls[0]["t"] == 10.0
    assert second.params.global_step == 20


def test_permanent_failure_under_sync_is_a_deadlock() -> None:
    profiles = homogeneous_profiles(3)[:2] + [WorkerProfile(2, failures=((0.0, None),))]
    with pytest.raises(DeadlockError) as info:
        run(_task(4, 30), SyncMode(n_workers=3, batch_size=4), profiles)
    assert set(info.value.blocked) == {0, 1, 2}


def test_gba_survives_a_failure_and_recovery() -> None:
    profiles = homogeneous_profiles(3)[:2] + [WorkerProfile(2, failures=((2.5, 5.5),))]
    trace = run(_task(4, 60), GbaMode(m=3, batch_size=4), profiles)
    assert [r["kind"] for r in trace.of_kind("fail", "recover")] == ["fail", "recover"]
    assert trace.of_kind("fail")[0]["lost"] == 1
    check_trace_invariants(trace)


def test_download_pipeline_limits_throughput() -> None:
    slow = [WorkerProfile(0, download_time=2.0)]
    trace = run(_task(4, 5), GbaMode(m=1, batch_size=4), slow)
    steps = trace.of_kind("step")
    assert len(steps) == 5
    assert steps[-1]["t"] >= 10.0


def test_profile_count_must_match_mode() -> None:
    with pytest.raises(ConfigError):
        run(_task(4, 10), SyncMode(n_workers=3, batch_size=4), homogeneous_profiles(2))
