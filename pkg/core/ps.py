# core/ps.py
# Parameter-server state machine: token list, data list, gradient buffer,
# staleness filter, per-ID step tags and the aggregate-and-apply step.
from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from core.model import Aggregate, ModelParams, SparseGradient, apply_update
from core.modes import StepPolicy
from errors import ArgumentError, EndOfStream, InvariantError, ProtocolViolationError

logger = logging.getLogger(__name__)

DecayFn = Callable[[int, int, float], int]


def build_token_schedule(Q: int, M: int) -> list[int]:
    """t_i = floor(i / M): each value repeats M times, the last one possibly fewer."""
    if Q < 1 or M < 1:
        raise ArgumentError("token schedule needs Q >= 1 and M >= 1")
    return [i // M for i in range(Q)]


def staleness_filter(tau: int, k: int, iota: float) -> int:
    """Binary decay: 0 iff k - tau > iota."""
    if tau > k:
        raise ProtocolViolationError(f"token {tau} leads the global step {k}")
    return 0 if k - tau > iota else 1


class TokenList:
    """FIFO of token values generated lazily from the schedule, offset by `base`."""

    def __init__(self, capacity: int, base: int = 0, issued: int = 0, queued=()):
        self.capacity = capacity
        self.base = base
        self.issued = issued
        self._queue: deque[int] = deque(queued)

    def queued(self) -> list[int]:
        return list(self._queue)

    def refill(self, min_len: int) -> None:
        while len(self._queue) < min_len:
            self._queue.append(self.base + self.issued // self.capacity)
            self.issued += 1

    def pop(self) -> int:
        if not self._queue:
            raise InvariantError("token list empty after refill")
        return self._queue.popleft()

    def __len__(self) -> int:
        return len(self._queue)


@dataclass
class BufferEntry:
    gradient: SparseGradient
    token: int


@dataclass
class GradientBuffer:
    capacity: int
    entries: list[BufferEntry] = field(default_factory=list)

    def full(self) -> bool:
        return len(self.entries) >= self.capacity

    def drain(self) -> list[BufferEntry]:
        entries, self.entries = self.entries, []
        return entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class PullTicket:
    pull_id: int
    worker_id: int
    token: int
    pull_step: int
    batch_index: int


class Pull(NamedTuple):
    snapshot: ModelParams
    ticket: PullTicket
    batch: object


@dataclass(frozen=True)
class EntryRecord:
    worker_id: int
    token: int
    pull_step: int
    pull_id: int
    batch_index: int
    samples: int
    step: int
    kept: bool

    @property
    def staleness(self) -> int:
        """Token staleness k - tau as seen by the filter (may be negative if the token leads)."""
        return self.step - self.token

    @property
    def data_staleness(self) -> int:
        return self.step - self.pull_step


@dataclass
class AggregationReport:
    step: int
    global_step: int
    entries: list[EntryRecord]
    surviving: int
    dropped: int
    samples: int
    norm: float
    ids: tuple[int, ...] = ()
    cancelled: tuple[PullTicket, ...] = ()

    @property
    def applied_step(self) -> int:
        return self.step


@dataclass
class PsCounters:
    pulls: int = 0
    pushed: int = 0
    applied: int = 0
    dropped: int = 0
    rejected: int = 0
    cancelled: int = 0
    ignored_late: int = 0
    steps: int = 0
    applied_samples: int = 0


@dataclass
class PsState:
    params: ModelParams
    policy: StepPolicy
    eta: float
    token_list: TokenList
    data_list: deque
    buffer: GradientBuffer
    id_tags: dict[int, int] = field(default_factory=dict)
    counters: PsCounters = field(default_factory=PsCounters)
    outstanding: dict[int, PullTicket] = field(default_factory=dict)
    cancelled: set[int] = field(default_factory=set)
    last_pull_step: dict[int, int | None] = field(default_factory=dict)
    clocks: dict[int, int] = field(default_factory=dict)
    alive: set[int] = field(default_factory=set)
    decay: DecayFn = staleness_filter
    next_pull_id: int = 0
    max_version_gap: int = 0

    @property
    def k(self) -> int:
        return self.params.global_step

    @property
    def data_remaining(self) -> int:
        return len(self.data_list)


def new_ps_state(params: ModelParams, batches, policy: StepPolicy, eta: float, *,
                 id_tags: dict[int, int] | None = None, decay: DecayFn | None = None) -> PsState:
    """Fresh PS for one pass over `batches`; tokens start at the current global step."""
    if not eta > 0:
        raise ArgumentError(f"learning rate must be positive, got {eta}")
    workers = range(policy.n_workers)
    return PsState(
        params=params,
        policy=policy,
        eta=eta,
        token_list=TokenList(policy.capacity, base=params.global_step),
        data_list=deque(batches),
        buffer=GradientBuffer(policy.capacity),
        id_tags=dict(id_tags or {}),
        last_pull_step={w: None for w in workers},
        clocks={w: 0 for w in workers},
        alive=set(workers),
        decay=decay or staleness_filter,
    )


@dataclass
class PsCursor:
    """PS state part-way through an epoch; parameters and ID tags travel separately."""

    data_position: int
    token_base: int
    tokens_issued: int
    token_queue: list[int]
    buffer: list[BufferEntry]
    counters: PsCounters
    outstanding: list[PullTicket]
    cancelled: list[int]
    last_pull_step: dict[int, int | None]
    clocks: dict[int, int]
    alive: list[int]
    next_pull_id: int
    max_version_gap: int


def capture(state: PsState, total_batches: int) -> PsCursor:
    """Snapshot `state`; its data list must be the tail of an epoch of `total_batches`."""
    tokens = state.token_list
    return PsCursor(
        data_position=total_batches - len(state.data_list),
        token_base=tokens.base,
        tokens_issued=tokens.issued,
        token_queue=tokens.queued(),
        buffer=list(state.buffer.entries),
        counters=replace(state.counters),
        outstanding=sorted(state.outstanding.values(), key=lambda t: t.pull_id),
        cancelled=sorted(state.cancelled),
        last_pull_step=dict(state.last_pull_step),
        clocks=dict(state.clocks),
        alive=sorted(state.alive),
        next_pull_id=state.next_pull_id,
        max_version_gap=state.max_version_gap,
    )


def restore(state: PsState, cursor: PsCursor) -> None:
    """Load `cursor` into a fresh state built over the batches from `cursor.data_position` on."""
    if len(cursor.buffer) >= state.buffer.capacity:
        raise InvariantError(f"captured buffer holds {len(cursor.buffer)} entries, capacity {state.buffer.capacity}")
    if set(cursor.clocks) != set(range(state.policy.n_workers)):
        raise InvariantError(f"captured clocks {sorted(cursor.clocks)} do not match {state.policy.n_workers} workers")
    state.token_list = TokenList(state.policy.capacity, cursor.token_base, cursor.tokens_issued, cursor.token_queue)
    state.buffer.entries = list(cursor.buffer)
    state.counters = replace(cursor.counters)
    state.outstanding = {t.pull_id: t for t in cursor.outstanding}
    state.cancelled = set(cursor.cancelled)
    state.last_pull_step = dict(cursor.last_pull_step)
    state.clocks = dict(cursor.clocks)
    state.alive = set(cursor.alive)
    state.next_pull_id = cursor.next_pull_id
    state.max_version_gap = cursor.max_version_gap
    check_conservation(state)


def batch_feature_ids(batch) -> np.ndarray:
    ids = getattr(batch, "ids", None)
    if ids is None:
        return np.empty(0, dtype=np.int64)
    return np.unique(np.asarray(ids))


def _version_gap(state: PsState, worker_id: int) -> int:
    alive = [state.clocks[w] for w in state.alive]
    return state.clocks[worker_id] - min(alive) if alive else 0


def in_flight(state: PsState, worker_id: int) -> bool:
    """True while a gradient pulled by `worker_id` has not reached the PS."""
    return any(t.worker_id == worker_id for t in state.outstanding.values())


def can_pull(state: PsState, worker_id: int) -> bool:
    if worker_id not in state.alive:
        return False
    policy = state.policy
    if policy.barrier and state.last_pull_step.get(worker_id) == state.k:
        return False
    if policy.staleness_bound is not None:
        # A worker's version counts delivered gradients, so it waits for its own push first.
        if in_flight(state, worker_id) or _version_gap(state, worker_id) > policy.staleness_bound:
            return False
    return True


def next_batch(state: PsState):
    if not state.data_list:
        raise EndOfStream("data list exhausted")
    return state.data_list.popleft()


def pull(state: PsState, worker_id: int, batch=None) -> Pull:
    """Dequeue a token, take a batch (unless one was prefetched) and snapshot the parameters."""
    if worker_id not in state.alive:
        raise ProtocolViolationError(f"worker {worker_id} is not alive")
    if batch is None:
        batch = next_batch(state)
    # Keep at least one queued token per worker.
    state.token_list.refill(state.policy.n_workers)
    token = state.token_list.pop()

    params = state.params
    snapshot = ModelParams(params.dense.copy(), params.embeddings.subset(batch_feature_ids(batch)), params.global_step)
    ticket = PullTicket(state.next_pull_id, worker_id, token, params.global_step, int(getattr(batch, "index", -1)))
    state.next_pull_id += 1
    state.outstanding[ticket.pull_id] = ticket
    state.last_pull_step[worker_id] = params.global_step
    state.counters.pulls += 1
    if state.policy.staleness_bound is not None:
        state.max_version_gap = max(state.max_version_gap, _version_gap(state, worker_id))
    return Pull(snapshot, ticket, batch)


def stamp(gradient: SparseGradient, ticket: PullTicket) -> SparseGradient:
    gradient.token = ticket.token
    gradient.worker_id = ticket.worker_id
    gradient.pull_step = ticket.pull_step
    gradient.pull_id = ticket.pull_id
    gradient.batch_index = ticket.batch_index
    return gradient


def push(state: PsState, gradient: SparseGradient) -> AggregationReport | None:
    """Buffer a gradient; aggregate when the buffer reaches capacity."""
    pull_id = gradient.pull_id
    if pull_id in state.cancelled:
        state.cancelled.discard(pull_id)
        state.counters.ignored_late += 1
        logger.debug(f"late push from worker {gradient.worker_id} ignored (pull {pull_id} cancelled)")
        return None
    ticket = state.outstanding.pop(pull_id, None)
    if ticket is None:
        raise ProtocolViolationError(f"push for unknown pull {pull_id} from worker {gradient.worker_id}")
    if not gradient.is_finite():
        state.counters.rejected += 1
        logger.warning(f"⚠️ Rejected non-finite gradient from worker {ticket.worker_id} (token {ticket.token})")
        return None

    bound = state.policy.staleness_bound
    if bound is not None and ticket.worker_id in state.alive:
        gap = _version_gap(state, ticket.worker_id)
        if gap > bound:
            raise ProtocolViolationError(
                f"worker {ticket.worker_id} pushed {gap} versions ahead of the slowest worker (bound {bound})"
            )
        state.max_version_gap = max(state.max_version_gap, gap)

    state.buffer.entries.append(BufferEntry(gradient, ticket.token))
    state.counters.pushed += 1
    if ticket.worker_id in state.clocks:
        state.clocks[ticket.worker_id] += 1
    if state.buffer.full():
        return aggregate_and_apply(state)
    return None


def aggregate_and_apply(state: PsState, eta: float | None = None) -> AggregationReport:
    buffer = state.buffer
    if len(buffer) != buffer.capacity:
        raise InvariantError(f"aggregation with {len(buffer)} entries, capacity {buffer.capacity}")
    eta = state.eta if eta is None else eta
    k = state.k
    iota = state.policy.iota
    entries = sorted(buffer.entries, key=lambda e: (e.token, e.gradient.worker_id, e.gradient.pull_id))

    # 1. dense part: binary staleness weight per entry, divisor stays the capacity
    weights = [state.decay(min(e.token, k), k, iota) for e in entries]
    dense = np.zeros_like(state.params.dense)
    for weight, entry in zip(weights, entries):
        if weight:
            dense += weight * entry.gradient.dense
    dense /= buffer.capacity

    # 2. embeddings: filter against each ID's tagged step, divide by surviving workers
    sums: dict[int, np.ndarray] = {}
    touched: dict[int, set[int]] = {}
    for entry in entries:
        grad = entry.gradient
        for fid in sorted(grad.sparse):
            tag = state.id_tags.get(fid)
            weight = 1 if tag is None else state.decay(min(entry.token, tag), tag, iota)
            if not weight:
                continue
            if fid in sums:
                sums[fid] += weight * grad.sparse[fid]
            else:
                sums[fid] = weight * grad.sparse[fid]
            touched.setdefault(fid, set()).add(grad.worker_id)
    sparse = {fid: sums[fid] / len(touched[fid]) for fid in sorted(sums)}

    aggregate = Aggregate(dense, sparse)
    apply_update(state.params, aggregate, eta)
    new_step = state.k
    for fid in sparse:
        state.id_tags[fid] = new_step
    buffer.drain()

    records = [
        EntryRecord(e.gradient.worker_id, e.token, e.gradient.pull_step, e.gradient.pull_id,
                    e.gradient.batch_index, e.gradient.samples, k, bool(w))
        for w, e in zip(weights, entries)
    ]
    surviving = sum(1 for r in records if r.kept)
    dropped = len(records) - surviving
    counters = state.counters
    counters.steps += 1
    counters.applied += surviving
    counters.dropped += dropped
    counters.applied_samples += sum(r.samples for r in records if r.kept)

    cancelled: tuple[PullTicket, ...] = ()
    if state.policy.backup:
        # Backup workers: whoever is still computing for this step is discarded.
        cancelled = tuple(t for t in state.outstanding.values() if t.pull_step <= k)
        for ticket in cancelled:
            del state.outstanding[ticket.pull_id]
            state.cancelled.add(ticket.pull_id)
        counters.cancelled += len(cancelled)

    if dropped:
        logger.debug(f"step {k}: dropped {dropped} stale gradient(s)")
    return AggregationReport(
        step=k,
        global_step=new_step,
        entries=records,
        surviving=surviving,
        dropped=dropped,
        samples=sum(r.samples for r in records if r.kept),
        norm=aggregate.norm(),
        ids=tuple(sparse),
        cancelled=cancelled,
    )


def forget(state: PsState, worker_id: int, pull_ids=()) -> None:
    """A worker failed: its unsent tokens vanish and it leaves the alive set."""
    for pull_id in pull_ids:
        state.outstanding.pop(pull_id, None)
    state.alive.discard(worker_id)
    state.last_pull_step[worker_id] = None


def recover(state: PsState, worker_id: int) -> None:
    others = [state.clocks[w] for w in state.alive]
    state.alive.add(worker_id)
    if others:
        state.clocks[worker_id] = max(state.clocks.get(worker_id, 0), min(others))
    state.last_pull_step[worker_id] = None


def measured_data_staleness(report: AggregationReport) -> list[int]:
    return [r.step - r.pull_step for r in report.entries]


def in_buffer(state: PsState) -> int:
    return len(state.buffer)


def check_conservation(state: PsState) -> None:
    c = state.counters
    if c.applied + c.dropped + in_buffer(state) != c.pushed:
        raise InvariantError(
            f"conservation broken: applied {c.applied} + dropped {c.dropped} + in buffer {in_buffer(state)} != pushed {c.pushed}"
        )
