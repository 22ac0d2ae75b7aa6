# cluster/simulator.py
# Deterministic discrete-event execution of the worker loop (pull -> compute -> push)
# against one PS state machine.
from __future__ import annotations

import heapq
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import IntEnum

from cluster.metrics import summarize_records
from cluster.profiles import WorkerProfile
from cluster.trace import Trace, report_records, snapshot_record
from core import ps
from core.model import ModelParams
from core.modes import ModeConfig, step_semantics
from errors import ConfigError, DeadlockError
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

DOWNLOAD_RETRY_SECONDS = 0.1


class EventKind(IntEnum):
    # The value is the tie-break phase at equal times: pushes are served before pulls.
    WORKER_FAIL = 0
    WORKER_RECOVER = 1
    COMPUTE_COMPLETE = 2
    PUSH_ARRIVE = 3
    PULL_REQUEST = 4
    DOWNLOAD_COMPLETE = 5
    DOWNLOAD_RETRY = 6


@dataclass(order=True)
class SimEvent:
    time: float
    phase: int
    seq: int
    kind: EventKind = field(compare=False)
    worker_id: int = field(compare=False)
    gen: int = field(compare=False, default=0)
    payload: object = field(compare=False, default=None)


@dataclass
class SimConfig:
    pull_latency: float = 0.0
    push_latency: float = 0.0
    max_steps: int | None = None
    record_snapshots: bool = False
    log_norms: bool = True
    log_ids: bool = False

    def __post_init__(self):
        if self.pull_latency < 0 or self.push_latency < 0:
            raise ConfigError("latencies must be >= 0", field="cluster.pull_latency")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0", field="run.max_steps")


IDLE, COMPUTING, BLOCKED, WAITING_DATA, DONE, FAILED = "idle", "computing", "blocked", "waiting_data", "done", "failed"


@dataclass
class _Worker:
    profile: WorkerProfile
    rng: object
    alive: bool = True
    gen: int = 0
    life_gen: int = 0
    status: str = IDLE
    pull: ps.Pull | None = None
    local: deque = field(default_factory=deque)
    downloading: bool = False
    retry_pending: bool = False

    @property
    def id(self) -> int:
        return self.profile.worker_id


@dataclass
class WorkerCursor:
    rng_state: dict
    alive: bool
    gen: int
    life_gen: int
    status: str
    snapshot: ModelParams | None = None
    ticket: ps.PullTicket | None = None
    local: list[int] = field(default_factory=list)
    downloading: bool = False
    retry_pending: bool = False


@dataclass
class EpochCursor:
    """Simulator state at a step-budget stop, enough to finish the epoch bit-exactly.

    Batches are referred to by their index in the epoch's batch list; pending
    DOWNLOAD_COMPLETE events carry that index as payload, PUSH_ARRIVE events the gradient.
    """

    epoch: int
    now: float
    server: ps.PsCursor
    workers: list[WorkerCursor]
    events: list[SimEvent]
    seq: int
    productive: int


class ClusterSimulator:
    """One pass over a task's epoch data under a training mode.

    `resume` continues an epoch captured at a step-budget stop; `batch_offset` starts
    a fresh PS part-way through the epoch's batches instead.
    """

    def __init__(self, task, mode: ModeConfig, profiles: list[WorkerProfile], config: SimConfig | None = None,
                 seed: int = 0, *, params: ModelParams | None = None, epoch: int = 0,
                 id_tags: dict[int, int] | None = None, t0: float = 0.0, batch_offset: int = 0,
                 resume: EpochCursor | None = None):
        self.task = task
        self.mode = mode
        self.policy = step_semantics(mode)
        if len(profiles) != self.policy.n_workers:
            raise ConfigError(
                f"{mode.kind} needs {self.policy.n_workers} workers but {len(profiles)} profiles were given",
                field="cluster.profiles",
            )
        if sorted(p.worker_id for p in profiles) != list(range(len(profiles))):
            raise ConfigError("worker ids must be 0..N-1", field="cluster.profiles")
        self.config = config or SimConfig()
        self.seed = seed
        self.epoch = epoch
        self.t0 = t0
        self.now = t0
        self.params = params if params is not None else task.initial_params()
        self._batches = task.epoch_batches(epoch)
        if resume is not None:
            if resume.epoch != epoch or len(resume.workers) != len(profiles):
                raise ConfigError(f"cursor for epoch {resume.epoch} with {len(resume.workers)} workers cannot resume "
                                  f"epoch {epoch} with {len(profiles)}", field="cluster.profiles")
            batch_offset = resume.server.data_position
        if not 0 <= batch_offset <= len(self._batches):
            raise ConfigError(f"batch offset {batch_offset} outside the epoch's {len(self._batches)} batches")
        self.state = ps.new_ps_state(self.params, self._batches[batch_offset:], self.policy, mode.eta,
                                     id_tags=id_tags)
        if resume is not None:
            ps.restore(self.state, resume.server)
        self.workers = [
            _Worker(p, make_rng(seed, "compute", epoch, p.worker_id))
            for p in sorted(profiles, key=lambda p: p.worker_id)
        ]
        self.records: list[dict] = []
        self.reports: list[ps.AggregationReport] = []
        self.snapshots: dict = {}
        self._heap: list[SimEvent] = []
        self._seq = 0
        self._productive = 0
        self._stopped = False
        self._resume = resume
        self._budget_base = self.state.counters.steps

    # -- scheduling -------------------------------------------------------

    def _schedule(self, time: float, kind: EventKind, worker_id: int, gen: int = 0, payload=None) -> None:
        heapq.heappush(self._heap, SimEvent(time, int(kind), self._seq, kind, worker_id, gen, payload))
        self._seq += 1
        if kind is not EventKind.DOWNLOAD_RETRY:
            self._productive += 1

    def _record(self, kind: str, **fields) -> None:
        self.records.append({"t": self.now, "kind": kind, "epoch": self.epoch, **fields})

    # -- main loop --------------------------------------------------------

    def run(self) -> Trace:
        if self._resume is not None:
            self._restore(self._resume)
        else:
            self._start()
        if self.config.max_steps == 0:
            self._stopped = True
        handlers = {
            EventKind.WORKER_FAIL: self._on_fail,
            EventKind.WORKER_RECOVER: self._on_recover,
            EventKind.COMPUTE_COMPLETE: self._on_compute_complete,
            EventKind.PUSH_ARRIVE: self._on_push_arrive,
            EventKind.PULL_REQUEST: self._on_pull_request,
            EventKind.DOWNLOAD_COMPLETE: self._on_download_complete,
            EventKind.DOWNLOAD_RETRY: self._on_download_retry,
        }
        while self._heap and not self._stopped:
            event = heapq.heappop(self._heap)
            if event.kind is EventKind.DOWNLOAD_RETRY:
                if self._productive == 0:
                    # Only full-buffer polls remain; nothing else can happen.
                    break
            else:
                self._productive -= 1
            self.now = event.time
            handlers[event.kind](event)
        return self._finish()

    def _start(self) -> None:
        self.task.start_epoch(self.epoch)
        if self.config.record_snapshots:
            self.records.append(snapshot_record(self.t0, self.epoch, self.params))
            self.snapshots[self.params.global_step] = self.params.dense.copy()
        for w in self.workers:
            down_now = False
            for fail_at, recover_at in w.profile.failures:
                if recover_at is not None and recover_at <= self.t0:
                    continue
                if fail_at <= self.t0:
                    down_now = True
                    if recover_at is not None:
                        self._schedule(recover_at, EventKind.WORKER_RECOVER, w.id)
                else:
                    self._schedule(fail_at, EventKind.WORKER_FAIL, w.id)
                    if recover_at is not None:
                        self._schedule(recover_at, EventKind.WORKER_RECOVER, w.id)
            if down_now:
                w.alive = False
                w.status = FAILED
                ps.forget(self.state, w.id)
        for w in self.workers:
            if w.alive:
                if w.profile.uses_pipeline:
                    self._kick_download(w)
                self._schedule(self.now, EventKind.PULL_REQUEST, w.id, w.gen)

    def _restore(self, cursor: EpochCursor) -> None:
        self.task.start_epoch(self.epoch)
        self.now = cursor.now
        batches = self._batches
        if self.config.record_snapshots:
            self.records.append(snapshot_record(self.now, self.epoch, self.params))
            self.snapshots[self.params.global_step] = self.params.dense.copy()
        for w, saved in zip(self.workers, cursor.workers):
            w.rng.bit_generator.state = saved.rng_state
            w.alive, w.gen, w.life_gen, w.status = saved.alive, saved.gen, saved.life_gen, saved.status
            if saved.ticket is not None:
                w.pull = ps.Pull(saved.snapshot, saved.ticket, batches[saved.ticket.batch_index])
            w.local = deque(batches[i] for i in saved.local)
            w.downloading, w.retry_pending = saved.downloading, saved.retry_pending
        self._heap = [
            replace(ev, payload=batches[ev.payload]) if ev.kind is EventKind.DOWNLOAD_COMPLETE else replace(ev)
            for ev in cursor.events
        ]
        heapq.heapify(self._heap)
        self._seq, self._productive = cursor.seq, cursor.productive
        logger.info(f"🔁 Resuming epoch {self.epoch} at step {self.state.k} (batch {cursor.server.data_position}, "
                    f"{len(self._heap)} pending events)")

    def cursor(self) -> EpochCursor:
        """Capture the state left by a step-budget stop."""
        workers = [
            WorkerCursor(
                rng_state=w.rng.bit_generator.state, alive=w.alive, gen=w.gen, life_gen=w.life_gen, status=w.status,
                snapshot=w.pull.snapshot if w.pull is not None else None,
                ticket=w.pull.ticket if w.pull is not None else None,
                local=[int(b.index) for b in w.local], downloading=w.downloading, retry_pending=w.retry_pending,
            )
            for w in self.workers
        ]
        events = [
            replace(ev, payload=int(ev.payload.index)) if ev.kind is EventKind.DOWNLOAD_COMPLETE else replace(ev)
            for ev in sorted(self._heap)
        ]
        return EpochCursor(self.epoch, self.now, ps.capture(self.state, len(self._batches)), workers, events,
                           self._seq, self._productive)

    # -- worker lifecycle ---------------------------------------------------

    def _exhausted(self, w: _Worker) -> bool:
        if self.state.data_list:
            return False
        return not (w.profile.uses_pipeline and (w.local or w.downloading))

    def _attempt(self, w: _Worker) -> None:
        if not w.alive or w.status == COMPUTING:
            return
        if self._exhausted(w):
            w.status = DONE
            return
        if not ps.can_pull(self.state, w.id):
            w.status = BLOCKED
            return
        if w.profile.uses_pipeline:
            if not w.local:
                w.status = WAITING_DATA
                return
            batch = w.local.popleft()
            self._kick_download(w)
        else:
            batch = ps.next_batch(self.state)

        pulled = ps.pull(self.state, w.id, batch)
        ticket = pulled.ticket
        extra = {}
        if self.policy.staleness_bound is not None:
            clocks = [self.state.clocks[x] for x in self.state.alive]
            extra["gap"] = self.state.clocks[w.id] - min(clocks)
        if self.config.log_ids and getattr(batch, "ids", None) is not None:
            extra["ids"] = ps.batch_feature_ids(batch).tolist()
        self._record("pull", worker=w.id, token=ticket.token, pull_step=ticket.pull_step,
                     pull_id=ticket.pull_id, batch=ticket.batch_index, **extra)
        w.pull = pulled
        w.status = COMPUTING
        compute = w.profile.compute_time(w.rng, self.now)
        self._schedule(self.now + self.config.pull_latency + compute, EventKind.COMPUTE_COMPLETE, w.id, w.gen)

    def _release_blocked(self) -> None:
        for w in self.workers:
            if w.status == BLOCKED:
                w.status = IDLE
                self._schedule(self.now, EventKind.PULL_REQUEST, w.id, w.gen)

    def _on_pull_request(self, ev: SimEvent) -> None:
        w = self.workers[ev.worker_id]
        if ev.gen == w.gen:
            self._attempt(w)

    def _on_compute_complete(self, ev: SimEvent) -> None:
        w = self.workers[ev.worker_id]
        if ev.gen != w.gen or w.pull is None:
            return
        pulled, w.pull = w.pull, None
        gradient = ps.stamp(self.task.gradient(pulled.snapshot, pulled.batch), pulled.ticket)
        w.status = IDLE
        # Non-blocking push: the worker asks for its next batch right away.
        self._schedule(self.now + self.config.push_latency, EventKind.PUSH_ARRIVE, w.id, payload=gradient)
        self._schedule(self.now, EventKind.PULL_REQUEST, w.id, w.gen)

    def _on_push_arrive(self, ev: SimEvent) -> None:
        gradient = ev.payload
        counters = self.state.counters
        pushed, rejected = counters.pushed, counters.rejected
        report = ps.push(self.state, gradient)
        fields = dict(worker=gradient.worker_id, token=gradient.token, pull_step=gradient.pull_step,
                      pull_id=gradient.pull_id, samples=gradient.samples)
        if counters.pushed > pushed:
            self._record("push", **fields)
        elif counters.rejected > rejected:
            self._record("reject", **fields)
        else:
            self._record("ignore", **fields)
        if report is not None:
            self._on_report(report)
        self._release_blocked()

    def _on_report(self, report: ps.AggregationReport) -> None:
        self.reports.append(report)
        extra = self.task.step_metrics(self.params)
        self.records.extend(report_records(report, self.now, self.epoch, norm=self.config.log_norms,
                                           ids=self.config.log_ids, extra=extra))
        if self.config.record_snapshots:
            self.records.append(snapshot_record(self.now, self.epoch, self.params))
            self.snapshots[self.params.global_step] = self.params.dense.copy()
        for ticket in report.cancelled:
            w = self.workers[ticket.worker_id]
            if w.pull is not None and w.pull.ticket.pull_id == ticket.pull_id:
                # Backup-worker cut: abandon the batch and start on the next step.
                w.gen += 1
                w.pull = None
                w.status = IDLE
                self._schedule(self.now, EventKind.PULL_REQUEST, w.id, w.gen)
        if self.config.max_steps is not None and self.state.counters.steps - self._budget_base >= self.config.max_steps:
            self._stopped = True

    def _on_fail(self, ev: SimEvent) -> None:
        w = self.workers[ev.worker_id]
        if not w.alive:
            return
        lost = [w.pull.ticket.pull_id] if w.pull is not None else []
        w.alive = False
        w.gen += 1
        w.life_gen += 1
        w.pull = None
        w.local.clear()
        w.downloading = False
        w.retry_pending = False
        w.status = FAILED
        ps.forget(self.state, w.id, lost)
        self._record("fail", worker=w.id, lost=len(lost))
        logger.debug(f"worker {w.id} failed at t={self.now:.3f}, lost {len(lost)} token(s)")
        self._release_blocked()

    def _on_recover(self, ev: SimEvent) -> None:
        w = self.workers[ev.worker_id]
        if w.alive:
            return
        w.alive = True
        w.status = IDLE
        ps.recover(self.state, w.id)
        self._record("recover", worker=w.id)
        if w.profile.uses_pipeline:
            self._kick_download(w)
        self._schedule(self.now, EventKind.PULL_REQUEST, w.id, w.gen)

    # -- download pipeline ----------------------------------------------------

    def _kick_download(self, w: _Worker) -> None:
        if not w.alive or w.downloading or w.retry_pending:
            return
        if len(w.local) >= w.profile.download_capacity:
            w.retry_pending = True
            self._schedule(self.now + DOWNLOAD_RETRY_SECONDS, EventKind.DOWNLOAD_RETRY, w.id, w.life_gen)
            return
        if not self.state.data_list:
            return
        batch = ps.next_batch(self.state)
        w.downloading = True
        self._schedule(self.now + w.profile.download_time, EventKind.DOWNLOAD_COMPLETE, w.id, w.life_gen, batch)

    def _on_download_complete(self, ev: SimEvent) -> None:
        w = self.workers[ev.worker_id]
        if ev.gen != w.life_gen:
            return
        w.downloading = False
        w.local.append(ev.payload)
        self._kick_download(w)
        if w.status == WAITING_DATA:
            w.status = IDLE
            self._schedule(self.now, EventKind.PULL_REQUEST, w.id, w.gen)

    def _on_download_retry(self, ev: SimEvent) -> None:
        w = self.workers[ev.worker_id]
        if ev.gen != w.life_gen:
            return
        w.retry_pending = False
        self._kick_download(w)

    # -- wrap-up ----------------------------------------------------------------

    def _finish(self) -> Trace:
        if not self._stopped:
            data_left = bool(self.state.data_list) or any(w.local for w in self.workers if w.alive)
            stuck = [w for w in self.workers if w.status in (BLOCKED, WAITING_DATA)]
            if data_left and (stuck or not any(w.alive for w in self.workers)):
                blocked = {
                    w.id: {"status": w.status, "last_pull_step": self.state.last_pull_step.get(w.id),
                           "clock": self.state.clocks.get(w.id)}
                    for w in self.workers
                }
                logger.error(f"❌ Deadlock at t={self.now:.3f}, step {self.state.k}: {blocked}")
                raise DeadlockError(
                    f"no event can make progress at t={self.now:.3f} (step {self.state.k}, "
                    f"{len(self.state.data_list)} batches left)", blocked
                )

        counters = self.state.counters
        epoch_row = {
            "t": self.now, "kind": "epoch", "epoch": self.epoch, "t0": self.t0,
            "pushed": counters.pushed, "applied": counters.applied, "dropped": counters.dropped,
            "rejected": counters.rejected, "cancelled": counters.cancelled, "ignored_late": counters.ignored_late,
            "in_buffer": ps.in_buffer(self.state), "steps": counters.steps, "pulls": counters.pulls,
            "max_version_gap": self.state.max_version_gap, "global_step": self.state.k,
        }
        self.records.append(epoch_row)
        ps.check_conservation(self.state)
        summary = summarize_records(self.records, n_workers=self.policy.n_workers)
        trace = Trace(records=self.records, reports=self.reports, params=self.params,
                      id_tags=dict(self.state.id_tags), summary=summary, snapshots=self.snapshots)
        if self._stopped:
            trace.resume = self.cursor()
            trace.data_cursor = trace.resume.server.data_position
        return trace


def run(task, mode: ModeConfig, profiles: list[WorkerProfile], config: SimConfig | None = None, seed: int = 0,
        **kwargs) -> Trace:
    """Simulate one epoch of `task` under `mode`; see ClusterSimulator for keyword options."""
    return ClusterSimulator(task, mode, profiles, config, seed, **kwargs).run()
