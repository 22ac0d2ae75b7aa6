# cluster/live.py
# Live runner: one thread per worker plus one PS thread, talking over queues.
# Ordering is nondeterministic; the PS state is only touched by the PS thread.
from __future__ import annotations

import logging
import queue
import threading
import time

import settings
from cluster.metrics import summarize_records
from cluster.profiles import WorkerProfile
from cluster.simulator import SimConfig
from cluster.trace import Trace, report_records, snapshot_record
from core import ps
from core.model import ModelParams
from core.modes import ModeConfig, step_semantics
from errors import ConfigError, DeadlockError, LabError
from utils.seeding import make_rng

logger = logging.getLogger(__name__)

POLL_SECONDS = 0.2


class LiveRunner:
    def __init__(self, task, mode: ModeConfig, profiles: list[WorkerProfile], config: SimConfig | None = None,
                 seed: int = 0, *, params: ModelParams | None = None, epoch: int = 0,
                 id_tags: dict[int, int] | None = None, t0: float = 0.0, batch_offset: int = 0,
                 wall_budget: float = 60.0, time_scale: float | None = None):
        self.task = task
        self.mode = mode
        self.policy = step_semantics(mode)
        if len(profiles) != self.policy.n_workers:
            raise ConfigError(
                f"{mode.kind} needs {self.policy.n_workers} workers but {len(profiles)} profiles were given",
                field="cluster.profiles",
            )
        if any(p.failures or p.uses_pipeline for p in profiles):
            logger.warning("⚠️ Live runner ignores failure schedules and download pipelines")
        self.profiles = sorted(profiles, key=lambda p: p.worker_id)
        self.config = config or SimConfig()
        self.seed = seed
        self.epoch = epoch
        self.t0 = t0
        self.wall_budget = wall_budget
        self.time_scale = settings.live_time_scale() if time_scale is None else max(time_scale, 0.0)
        self.params = params if params is not None else task.initial_params()
        batches = task.epoch_batches(epoch)
        if not 0 <= batch_offset <= len(batches):
            raise ConfigError(f"batch offset {batch_offset} outside the epoch's {len(batches)} batches")
        self._total = len(batches)
        self.state = ps.new_ps_state(self.params, batches[batch_offset:], self.policy, mode.eta, id_tags=id_tags)
        self.records: list[dict] = []
        self.reports: list[ps.AggregationReport] = []
        self.snapshots: dict = {}
        self._inbox: queue.Queue = queue.Queue()
        self._replies = {p.worker_id: queue.Queue() for p in self.profiles}
        self._deferred: list[int] = []
        self._stop = False
        self._error: Exception | None = None
        self._started = 0.0

    def _now(self) -> float:
        elapsed = time.monotonic() - self._started
        return self.t0 + (elapsed / self.time_scale if self.time_scale > 0 else elapsed)

    def _record(self, kind: str, **fields) -> None:
        self.records.append({"t": self._now(), "kind": kind, "epoch": self.epoch, **fields})

    # -- worker side ---------------------------------------------------------

    def _worker_loop(self, profile: WorkerProfile) -> None:
        w = profile.worker_id
        rng = make_rng(self.seed, "compute", self.epoch, w)
        replies = self._replies[w]
        try:
            while True:
                self._inbox.put(("pull", w, None))
                kind, pulled = replies.get()
                if kind == "done":
                    break
                seconds = profile.compute_time(rng, self._now())
                if self.time_scale > 0:
                    time.sleep(seconds * self.time_scale)
                gradient = ps.stamp(self.task.gradient(pulled.snapshot, pulled.batch), pulled.ticket)
                self._inbox.put(("push", w, gradient))
        except Exception as exc:  # reported by the PS thread
            self._inbox.put(("error", w, exc))
            return
        self._inbox.put(("exit", w, None))

    # -- PS side ---------------------------------------------------------------

    def _serve_pull(self, w: int) -> None:
        state = self.state
        if self._stop or not state.data_list:
            self._replies[w].put(("done", None))
            return
        if not ps.can_pull(state, w):
            if w not in self._deferred:
                self._deferred.append(w)
            return
        pulled = ps.pull(state, w)
        ticket = pulled.ticket
        extra = {}
        if self.policy.staleness_bound is not None:
            extra["gap"] = state.clocks[w] - min(state.clocks[x] for x in state.alive)
        self._record("pull", worker=w, token=ticket.token, pull_step=ticket.pull_step, pull_id=ticket.pull_id,
                     batch=ticket.batch_index, **extra)
        self._replies[w].put(("batch", pulled))

    def _retry_deferred(self) -> None:
        pending = sorted(self._deferred)
        self._deferred.clear()
        for w in pending:
            self._serve_pull(w)

    def _on_push(self, gradient) -> None:
        if self._stop:
            # Gradients still in flight when the run stops are never delivered.
            return
        counters = self.state.counters
        pushed = counters.pushed
        rejected = counters.rejected
        report = ps.push(self.state, gradient)
        fields = dict(worker=gradient.worker_id, token=gradient.token, pull_step=gradient.pull_step,
                      pull_id=gradient.pull_id, samples=gradient.samples)
        if counters.pushed > pushed:
            self._record("push", **fields)
        elif counters.rejected > rejected:
            self._record("reject", **fields)
        else:
            self._record("ignore", **fields)
        if report is None:
            return
        self.reports.append(report)
        now = self._now()
        self.records.extend(report_records(report, now, self.epoch, norm=self.config.log_norms,
                                           ids=self.config.log_ids, extra=self.task.step_metrics(self.params)))
        if self.config.record_snapshots:
            self.records.append(snapshot_record(now, self.epoch, self.params))
            self.snapshots[self.params.global_step] = self.params.dense.copy()
        if self.config.max_steps is not None and counters.steps >= self.config.max_steps:
            self._stop = True

    def _ps_loop(self, active: set[int]) -> None:
        while active:
            if not self._stop and time.monotonic() - self._started > self.wall_budget:
                logger.warning(f"⚠️ Live run hit its wall budget of {self.wall_budget}s; stopping")
                self._stop = True
                self._retry_deferred()
            try:
                kind, w, payload = self._inbox.get(timeout=POLL_SECONDS)
            except queue.Empty:
                continue
            try:
                if kind == "pull":
                    self._serve_pull(w)
                elif kind == "push":
                    self._on_push(payload)
                    self._retry_deferred()
                elif kind == "exit":
                    active.discard(w)
                elif kind == "error":
                    active.discard(w)
                    self._fail(payload)
            except LabError as exc:
                self._fail(exc)

            if (self._deferred and set(self._deferred) >= active and not self.state.outstanding
                    and self.state.data_list and not self._stop):
                self._fail(DeadlockError(
                    f"all live workers blocked at step {self.state.k} with {len(self.state.data_list)} batches left",
                    {x: {"last_pull_step": self.state.last_pull_step.get(x), "clock": self.state.clocks.get(x)}
                     for x in self._deferred},
                ))

    def _fail(self, exc: Exception) -> None:
        if self._error is None:
            self._error = exc
            logger.error(f"❌ Live run failed: {exc}")
        self._stop = True
        self._retry_deferred()

    def run(self) -> Trace:
        self.task.start_epoch(self.epoch)
        self._started = time.monotonic()
        if self.config.record_snapshots:
            self.records.append(snapshot_record(self.t0, self.epoch, self.params))
            self.snapshots[self.params.global_step] = self.params.dense.copy()
        if self.config.max_steps == 0:
            self._stop = True

        threads = [
            threading.Thread(target=self._worker_loop, args=(p,), name=f"worker-{p.worker_id}", daemon=True)
            for p in self.profiles
        ]
        ps_thread = threading.Thread(target=self._ps_loop, args=({p.worker_id for p in self.profiles},),
                                     name="ps", daemon=True)
        ps_thread.start()
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        ps_thread.join()
        if self._error is not None:
            raise self._error

        counters = self.state.counters
        self.records.append({
            "t": self._now(), "kind": "epoch", "epoch": self.epoch, "t0": self.t0,
            "pushed": counters.pushed, "applied": counters.applied, "dropped": counters.dropped,
            "rejected": counters.rejected, "cancelled": counters.cancelled, "ignored_late": counters.ignored_late,
            "in_buffer": ps.in_buffer(self.state), "steps": counters.steps, "pulls": counters.pulls,
            "max_version_gap": self.state.max_version_gap, "global_step": self.state.k,
        })
        ps.check_conservation(self.state)
        logger.info(f"✅ Live epoch {self.epoch} finished: {counters.steps} steps, {counters.dropped} dropped")
        trace = Trace(records=self.records, reports=self.reports, params=self.params, id_tags=dict(self.state.id_tags),
                      summary=summarize_records(self.records, n_workers=self.policy.n_workers),
                      snapshots=self.snapshots)
        if self._stop and self.state.data_list:
            # In-flight gradients are lost; the next run picks up at the first batch not handed out.
            trace.data_cursor = self._total - len(self.state.data_list)
        return trace


def live_run(task, mode: ModeConfig, profiles: list[WorkerProfile], config: SimConfig | None = None,
             seed: int = 0, **kwargs) -> Trace:
    return LiveRunner(task, mode, profiles, config, seed, **kwargs).run()
