# cluster/trace.py
# Trace: line-delimited event records, per-step aggregation reports and optional parameter snapshots.
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, NamedTuple

import numpy as np

from core import ps
from core.model import ModelParams, SparseGradient
from core.modes import ModeConfig, step_semantics
from core.ps import AggregationReport, EntryRecord, PullTicket
from errors import InvariantError, LoggingNotEnabledError

if TYPE_CHECKING:
    from cluster.simulator import EpochCursor

logger = logging.getLogger(__name__)

ENTRY_KINDS = ("apply", "drop")


@dataclass
class Trace:
    records: list[dict] = field(default_factory=list)
    reports: list[AggregationReport] = field(default_factory=list)
    params: ModelParams | None = None
    id_tags: dict[int, int] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    # Set when a step budget stopped the epoch: first batch not handed out, and (simulator only)
    # the full state needed to finish the epoch.
    data_cursor: int | None = None
    resume: EpochCursor | None = None

    @property
    def steps(self) -> int:
        return len(self.reports)

    def of_kind(self, *kinds: str) -> list[dict]:
        return [r for r in self.records if r.get("kind") in kinds]

    def snapshot(self, step: int) -> np.ndarray:
        if step not in self.snapshots:
            raise LoggingNotEnabledError(
                f"no parameter snapshot for step {step}; logging not enabled (output.record_snapshots)"
            )
        return self.snapshots[step]


def report_records(report: AggregationReport, t: float, epoch: int, *, norm: bool = True,
                   ids: bool = False, extra: dict | None = None) -> list[dict]:
    """Flatten one aggregation into entry records, cancel records and a closing step record."""
    rows = [
        {
            "t": t, "kind": "apply" if e.kept else "drop", "epoch": epoch, "worker": e.worker_id,
            "token": e.token, "pull_step": e.pull_step, "pull_id": e.pull_id, "batch": e.batch_index,
            "samples": e.samples, "apply_step": e.step, "staleness": e.staleness,
            "data_staleness": e.data_staleness,
        }
        for e in report.entries
    ]
    rows += [
        {"t": t, "kind": "cancel", "epoch": epoch, "worker": c.worker_id, "token": c.token,
         "pull_step": c.pull_step, "pull_id": c.pull_id, "apply_step": report.step}
        for c in report.cancelled
    ]
    step = {
        "t": t, "kind": "step", "epoch": epoch, "apply_step": report.step, "global_step": report.global_step,
        "surviving": report.surviving, "dropped": report.dropped, "cancelled": len(report.cancelled),
        "samples": report.samples,
    }
    if norm:
        step["norm"] = report.norm
    if ids:
        step["ids"] = list(report.ids)
    if extra:
        step.update(extra)
    rows.append(step)
    return rows


def snapshot_record(t: float, epoch: int, params: ModelParams) -> dict:
    return {"t": t, "kind": "snapshot", "epoch": epoch, "apply_step": params.global_step,
            "params": params.dense.tolist()}


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def _clean(record: dict) -> dict:
    # JSON has no infinity; write it as a string and read it back.
    return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in record.items()}


def write_trace(trace: Trace, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in trace.records:
            fh.write(json.dumps(_clean(record), default=_json_default) + "\n")
        if trace.summary:
            fh.write(json.dumps(_clean({"kind": "summary", **trace.summary}), default=_json_default) + "\n")
    logger.info(f"📦 Wrote trace with {len(trace.records)} records to {path}")
    return path


def read_records(path: str | Path) -> list[dict]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def reports_from_records(records: list[dict]) -> list[AggregationReport]:
    """Rebuild AggregationReports by grouping entry/cancel records up to each step record."""
    reports: list[AggregationReport] = []
    entries: list[EntryRecord] = []
    cancelled: list[PullTicket] = []
    for r in records:
        kind = r.get("kind")
        if kind in ENTRY_KINDS:
            entries.append(EntryRecord(
                int(r["worker"]), int(r["token"]), int(r["pull_step"]), int(r.get("pull_id", -1)),
                int(r.get("batch", -1)), int(r.get("samples", 0)), int(r["apply_step"]), kind == "apply",
            ))
        elif kind == "cancel":
            cancelled.append(PullTicket(int(r.get("pull_id", -1)), int(r["worker"]), int(r["token"]),
                                        int(r["pull_step"]), -1))
        elif kind == "step":
            reports.append(AggregationReport(
                step=int(r["apply_step"]), global_step=int(r["global_step"]), entries=entries,
                surviving=int(r["surviving"]), dropped=int(r["dropped"]), samples=int(r.get("samples", 0)),
                norm=float(r.get("norm", float("nan"))), ids=tuple(r.get("ids") or ()), cancelled=tuple(cancelled),
            ))
            entries, cancelled = [], []
    return reports


def trace_from_records(records: list[dict]) -> Trace:
    body = [r for r in records if r.get("kind") != "summary"]
    summaries = [r for r in records if r.get("kind") == "summary"]
    summary = {k: v for k, v in summaries[-1].items() if k != "kind"} if summaries else {}
    snapshots = {int(r["apply_step"]): np.asarray(r["params"], dtype=np.float64)
                 for r in body if r.get("kind") == "snapshot"}
    params = None
    if snapshots:
        last = max(snapshots)
        params = ModelParams(snapshots[last].copy(), global_step=last)
    return Trace(records=body, reports=reports_from_records(body), params=params, summary=summary,
                 snapshots=snapshots)


def load_trace(path: str | Path) -> Trace:
    return trace_from_records(read_records(path))


def merge_traces(traces: list[Trace]) -> Trace:
    """Concatenate per-epoch traces of one run."""
    if not traces:
        return Trace()
    merged = Trace()
    for trace in traces:
        merged.records.extend(trace.records)
        merged.reports.extend(trace.reports)
        merged.snapshots.update(trace.snapshots)
    merged.params = traces[-1].params
    merged.id_tags = dict(traces[-1].id_tags)
    merged.data_cursor, merged.resume = traces[-1].data_cursor, traces[-1].resume
    return merged


def recount_dropped(records: list[dict], iota: float) -> int:
    """Brute-force drop count from raw entry records, independent of the PS counters."""
    count = 0
    for r in records:
        if r.get("kind") in ENTRY_KINDS:
            k = int(r["apply_step"])
            tau = min(int(r["token"]), k)
            count += int(k - tau > iota)
    return count


def check_trace_invariants(trace: Trace) -> None:
    """Conservation, token monotonicity and linearizable aggregation on an emitted trace."""
    records = trace.records
    pulls = [r for r in records if r.get("kind") == "pull"]

    # tokens are dequeued in non-decreasing order within an epoch
    last: dict[int, int] = {}
    for r in pulls:
        epoch = int(r.get("epoch", 0))
        if int(r["token"]) < last.get(epoch, -1):
            raise InvariantError(f"token {r['token']} dequeued after {last[epoch]} (epoch {epoch})")
        last[epoch] = int(r["token"])

    # every pull observes the number of aggregations completed before it
    steps_seen: int | None = None
    for r in records:
        kind = r.get("kind")
        if kind == "step":
            if steps_seen is not None and int(r["apply_step"]) != steps_seen:
                raise InvariantError(f"step {r['apply_step']} applied out of order (expected {steps_seen})")
            steps_seen = int(r["global_step"])
        elif kind == "pull":
            if steps_seen is None:
                steps_seen = int(r["pull_step"])
            if int(r["pull_step"]) != steps_seen:
                raise InvariantError(f"pull observed step {r['pull_step']} while {steps_seen} were applied")

    # applied + dropped + in-buffer = pushed, per epoch summary
    for r in records:
        if r.get("kind") == "epoch":
            if int(r["applied"]) + int(r["dropped"]) + int(r["in_buffer"]) != int(r["pushed"]):
                raise InvariantError(f"conservation broken in epoch {r.get('epoch')}: {r}")
    entries = sum(1 for r in records if r.get("kind") in ENTRY_KINDS)
    pushes = sum(1 for r in records if r.get("kind") == "push")
    in_buffer = sum(int(r.get("in_buffer", 0)) for r in records if r.get("kind") == "epoch")
    if pushes and entries + in_buffer != pushes:
        raise InvariantError(f"{pushes} pushes recorded but {entries} aggregated and {in_buffer} left buffered")


PUSH_KINDS = ("push", "reject", "ignore")


class _ReplayBatch(NamedTuple):
    index: int


def _mismatch(r: dict, what: str) -> InvariantError:
    return InvariantError(f"replay diverges at {r.get('kind')} record (t={r.get('t')}, epoch {r.get('epoch')}): {what}")


def _compare_report(replayed: AggregationReport, recorded: AggregationReport, numeric: bool) -> None:
    mine = (replayed.step, replayed.global_step, replayed.entries, replayed.surviving, replayed.dropped,
            replayed.samples, [t.pull_id for t in replayed.cancelled])
    theirs = (recorded.step, recorded.global_step, recorded.entries, recorded.surviving, recorded.dropped,
              recorded.samples, [t.pull_id for t in recorded.cancelled])
    if mine != theirs:
        raise InvariantError(f"replayed step {replayed.step} differs from the recorded one: {mine} != {theirs}")
    if numeric and not math.isnan(recorded.norm) and not math.isclose(replayed.norm, recorded.norm, rel_tol=1e-9):
        raise InvariantError(f"step {replayed.step}: replayed norm {replayed.norm} != recorded {recorded.norm}")


def _compare_epoch(state: ps.PsState, r: dict) -> None:
    c = state.counters
    mine = {"pushed": c.pushed, "applied": c.applied, "dropped": c.dropped, "rejected": c.rejected,
            "cancelled": c.cancelled, "ignored_late": c.ignored_late, "steps": c.steps, "pulls": c.pulls,
            "in_buffer": ps.in_buffer(state), "global_step": state.k, "max_version_gap": state.max_version_gap}
    diff = {k: (v, r.get(k)) for k, v in mine.items() if k in r and int(r[k]) != v}
    if diff:
        raise _mismatch(r, f"epoch counters (replayed, recorded) {diff}")


def replay_trace(trace: Trace | list[dict], mode: ModeConfig, task=None, *, params: ModelParams | None = None,
                 id_tags: dict[int, int] | None = None) -> list[AggregationReport]:
    """Feed a trace's pull, push, fail and recover order through a fresh PS and check the reports match.

    With `task` the gradients are recomputed from the pulled snapshots, so norms and the
    final parameters are compared as well; without it the bookkeeping (tokens, staleness,
    drops, cancellations, counters) is replayed on zero gradients. Every epoch in the
    trace must start at its beginning, and `params` defaults to the task's initial ones.
    """
    records = trace.records if isinstance(trace, Trace) else list(trace)
    recorded = reports_from_records(records)
    policy = step_semantics(mode)
    delivered = {(r.get("epoch", 0), int(r["pull_id"])) for r in records if r.get("kind") in PUSH_KINDS}
    if params is not None:
        params = params.copy()
    elif task is not None:
        params = task.initial_params()
    else:
        first = next((r for r in records if r.get("kind") == "pull"), None)
        params = ModelParams(np.zeros(1), global_step=int(first["pull_step"]) if first else 0)
    tags = dict(id_tags or {})

    state: ps.PsState | None = None
    epoch, batches = None, None
    pulls: dict[int, ps.Pull] = {}
    replayed: list[AggregationReport] = []
    for r in records:
        kind = r.get("kind")
        if kind == "epoch":
            if state is not None:
                _compare_epoch(state, r)
                params, tags, state = state.params, state.id_tags, None
            continue
        if kind not in ("pull", "fail", "recover", *PUSH_KINDS):
            continue
        if state is None:
            epoch = r.get("epoch", 0)
            state = ps.new_ps_state(params, (), policy, mode.eta, id_tags=tags)
            batches = task.epoch_batches(int(epoch)) if task is not None else None
            pulls = {}
        w = int(r["worker"])

        if kind == "pull":
            if not ps.can_pull(state, w):
                raise _mismatch(r, f"the PS would not let worker {w} pull here")
            index = int(r["batch"])
            pulled = ps.pull(state, w, batches[index] if batches is not None else _ReplayBatch(index))
            ticket = pulled.ticket
            if (ticket.token, ticket.pull_step, ticket.pull_id) != (int(r["token"]), int(r["pull_step"]),
                                                                    int(r["pull_id"])):
                raise _mismatch(r, f"replayed ticket {ticket}")
            pulls[ticket.pull_id] = pulled
        elif kind in PUSH_KINDS:
            pulled = pulls.pop(int(r["pull_id"]), None)
            if pulled is None:
                raise _mismatch(r, f"push for pull {r['pull_id']} that was never replayed")
            if task is not None:
                gradient = task.gradient(pulled.snapshot, pulled.batch)
            else:
                fill = np.nan if kind == "reject" else 0.0
                gradient = SparseGradient(np.full_like(params.dense, fill), samples=int(r.get("samples", 0)))
            counters = state.counters
            before = (counters.pushed, counters.rejected)
            report = ps.push(state, ps.stamp(gradient, pulled.ticket))
            outcome = ("push" if counters.pushed > before[0] else
                       "reject" if counters.rejected > before[1] else "ignore")
            if outcome != kind:
                raise _mismatch(r, f"the PS treated it as {outcome}")
            if report is not None:
                if len(replayed) >= len(recorded):
                    raise _mismatch(r, f"replay applied step {report.step} that the trace does not record")
                _compare_report(report, recorded[len(replayed)], numeric=task is not None)
                replayed.append(report)
        elif kind == "fail":
            lost = [pid for pid, t in state.outstanding.items()
                    if t.worker_id == w and (epoch, pid) not in delivered]
            if len(lost) != int(r.get("lost", 0)):
                raise _mismatch(r, f"{len(lost)} undelivered pulls for worker {w}, trace says {r.get('lost')}")
            ps.forget(state, w, lost)
        else:
            ps.recover(state, w)

    if len(replayed) != len(recorded):
        raise InvariantError(f"replay produced {len(replayed)} steps, the trace records {len(recorded)}")
    final = state.params if state is not None else params
    if task is not None and isinstance(trace, Trace) and trace.params is not None:
        if final.dense.tobytes() != trace.params.dense.tobytes():
            raise InvariantError("replayed parameters differ from the trace's final parameters")
    logger.debug(f"replayed {len(replayed)} steps of {mode.kind}")
    return replayed
