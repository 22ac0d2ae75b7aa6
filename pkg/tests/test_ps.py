from __future__ import annotations

import math

import numpy as np
import pytest

from core import ps
from core.datagen import QuadBatch
from core.model import EmbeddingTable, ModelParams, SparseGradient
from core.modes import GbaMode, HopBsMode, HopBwMode, SyncMode, step_semantics
from errors import ArgumentError, EndOfStream, InvariantError, ProtocolViolationError


def _state(mode, batches: int = 20, dim: int = 2, id_tags=None) -> ps.PsState:
    params = ModelParams(np.zeros(dim), EmbeddingTable(2), 0)
    stream = [QuadBatch(i, i, 1) for i in range(batches)]
    return ps.new_ps_state(params, stream, step_semantics(mode), eta=1.0, id_tags=id_tags)


def _push(state: ps.PsState, pulled: ps.Pull, dense, sparse=None):
    grad = SparseGradient(np.asarray(dense, dtype=np.float64), dict(sparse or {}), samples=1)
    return ps.push(state, ps.stamp(grad, pulled.ticket))


def test_token_schedule_repeats_each_value_m_times() -> None:
    assert ps.build_token_schedule(10, 4) == [0, 0, 0, 0, 1, 1, 1, 1, 2, 2]
    with pytest.raises(ArgumentError):
        ps.build_token_schedule(0, 4)


def test_staleness_filter() -> None:
    assert ps.staleness_filter(2, 3, 1) == 1
    assert ps.staleness_filter(0, 3, 1) == 0
    assert ps.staleness_filter(0, 1000, math.inf) == 1
    with pytest.raises(ProtocolViolationError):
        ps.staleness_filter(4, 3, 1)


def test_token_list_starts_at_base() -> None:
    tokens = ps.TokenList(capacity=3, base=10)
    tokens.refill(5)
    assert [tokens.pop() for _ in range(5)] == [10, 10, 10, 11, 11]


def test_gba_aggregates_when_buffer_is_full() -> None:
    state = _state(GbaMode(m=2, batch_size=1))
    a, b = ps.pull(state, 0), ps.pull(state, 1)
    assert (a.ticket.token, b.ticket.token) == (0, 0)
    assert _push(state, a, [2.0, 0.0]) is None
    report = _push(state, b, [0.0, 4.0])
    assert report.step == 0 and report.global_step == 1
    np.testing.assert_allclose(state.params.dense, [-1.0, -2.0])
    assert report.surviving == 2 and report.dropped == 0
    assert report.norm == pytest.approx(math.sqrt(5.0))
    ps.check_conservation(state)


def test_stale_gradient_is_dropped_but_divisor_stays_capacity() -> None:
    state = _state(GbaMode(m=2, batch_size=1, iota=0))
    slow = ps.pull(state, 0)
    first = ps.pull(state, 1)
    _push(state, first, [1.0, 1.0])
    second = ps.pull(state, 1)
    _push(state, second, [1.0, 1.0])
    assert state.k == 1

    third = ps.pull(state, 1)
    _push(state, slow, [100.0, 100.0])
    report = _push(state, third, [2.0, 0.0])
    assert report.dropped == 1
    assert [r.kept for r in report.entries] == [False, True]
    assert ps.measured_data_staleness(report) == [1, 0]
    # (g1+g2)/2 then g3/2 with eta 1
    np.testing.assert_allclose(state.params.dense, [-2.0, -1.0])
    c = state.counters
    assert (c.pushed, c.applied, c.dropped) == (4, 3, 1)
    ps.check_conservation(state)


def test_sparse_rows_average_over_touching_workers_and_update_tags() -> None:
    state = _state(GbaMode(m=2, batch_size=1))
    a, b = ps.pull(state, 0), ps.pull(state, 1)
    _push(state, a, [0.0, 0.0], {7: np.array([2.0, 2.0]), 8: np.array([1.0, 1.0])})
    report = _push(state, b, [0.0, 0.0], {7: np.array([4.0, 4.0])})
    np.testing.assert_allclose(state.params.embeddings.lookup(7), [-3.0, -3.0])
    np.testing.assert_allclose(state.params.embeddings.lookup(8), [-1.0, -1.0])
    assert report.ids == (7, 8)
    assert state.id_tags == {7: 1, 8: 1}


def test_stale_embedding_rows_filtered_against_their_tag() -> None:
    state = _state(GbaMode(m=1, batch_size=1, iota=0), id_tags={5: 2})
    pulled = ps.pull(state, 0)
    _push(state, pulled, [1.0, 0.0], {5: np.array([1.0, 1.0]), 6: np.array([1.0, 1.0])})
    assert 5 not in state.params.embeddings
    np.testing.assert_allclose(state.params.embeddings.lookup(6), [-1.0, -1.0])
    assert state.id_tags == {5: 2, 6: 1}
    np.testing.assert_allclose(state.params.dense, [-1.0, 0.0])


def test_sync_barrier_blocks_second_pull_in_the_same_step() -> None:
    state = _state(SyncMode(n_workers=2, batch_size=1))
    a = ps.pull(state, 0)
    assert not ps.can_pull(state, 0)
    b = ps.pull(state, 1)
    _push(state, a, [0.0, 0.0])
    assert not ps.can_pull(state, 0)
    _push(state, b, [0.0, 0.0])
    assert ps.can_pull(state, 0) and ps.can_pull(state, 1)


def test_hop_bs_bounds_the_clock_gap() -> None:
    state = _state(HopBsMode(n_workers=2, batch_size=1, b1=1))
    slow = ps.pull(state, 1)
    for _ in range(2):
        assert ps.can_pull(state, 0)
        _push(state, ps.pull(state, 0), [0.0, 0.0])
    assert state.clocks == {0: 2, 1: 0}
    assert state.max_version_gap == 1
    assert not ps.can_pull(state, 0)
    assert not ps.can_pull(state, 1)
    _push(state, slow, [0.0, 0.0])
    assert ps.can_pull(state, 0) and ps.can_pull(state, 1)


def test_hop_bs_waits_for_its_own_push_to_land() -> None:
    state = _state(HopBsMode(n_workers=2, batch_size=1, b1=0))
    first = ps.pull(state, 0)
    ps.pull(state, 1)
    assert ps.in_flight(state, 0)
    assert not ps.can_pull(state, 0)
    _push(state, first, [0.0, 0.0])
    assert not ps.in_flight(state, 0)
    assert not ps.can_pull(state, 0)


def test_hop_bs_push_beyond_the_bound_is_a_violation() -> None:
    state = _state(HopBsMode(n_workers=2, batch_size=1, b1=0))
    ps.pull(state, 1)
    _push(state, ps.pull(state, 0), [0.0, 0.0])
    ahead = ps.pull(state, 0)
    with pytest.raises(ProtocolViolationError):
        _push(state, ahead, [0.0, 0.0])


def test_hop_bw_cancels_the_slowest_pull_and_ignores_its_late_push() -> None:
    state = _state(HopBwMode(n_workers=3, batch_size=1, b3=1))
    pulls = [ps.pull(state, w) for w in range(3)]
    _push(state, pulls[0], [1.0, 0.0])
    report = _push(state, pulls[1], [1.0, 0.0])
    assert [t.worker_id for t in report.cancelled] == [2]
    assert state.counters.cancelled == 1
    assert _push(state, pulls[2], [9.0, 9.0]) is None
    assert state.counters.ignored_late == 1
    np.testing.assert_allclose(state.params.dense, [-1.0, 0.0])
    ps.check_conservation(state)


def test_non_finite_push_is_rejected_and_unknown_pull_is_a_violation() -> None:
    state = _state(GbaMode(m=2, batch_size=1))
    pulled = ps.pull(state, 0)
    assert _push(state, pulled, [np.nan, 0.0]) is None
    assert state.counters.rejected == 1
    assert len(state.buffer) == 0
    with pytest.raises(ProtocolViolationError):
        _push(state, pulled, [0.0, 0.0])


def test_aggregate_requires_a_full_buffer() -> None:
    state = _state(GbaMode(m=2, batch_size=1))
    _push(state, ps.pull(state, 0), [0.0, 0.0])
    with pytest.raises(InvariantError):
        ps.aggregate_and_apply(state)


def test_pull_snapshot_is_isolated_from_later_updates() -> None:
    state = _state(GbaMode(m=1, batch_size=1))
    first = ps.pull(state, 0)
    _push(state, first, [1.0, 1.0])
    np.testing.assert_array_equal(first.snapshot.dense, [0.0, 0.0])
    assert first.snapshot.global_step == 0


def test_end_of_stream_and_failure_bookkeeping() -> None:
    state = _state(GbaMode(m=2, batch_size=1), batches=1)
    pulled = ps.pull(state, 0)
    with pytest.raises(EndOfStream):
        ps.pull(state, 1)
    ps.forget(state, 0, [pulled.ticket.pull_id])
    assert 0 not in state.alive and not state.outstanding
    assert not ps.can_pull(state, 0)
    with pytest.raises(ProtocolViolationError):
        ps.pull(state, 0)
    ps.recover(state, 0)
    assert 0 in state.alive
