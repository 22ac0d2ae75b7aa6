# cluster/metrics.py
# Throughput and staleness statistics computed from trace records.
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from errors import ArgumentError

METRICS_COLUMNS = ["step", "epoch", "sim_time", "loss", "auc", "mean_staleness", "max_staleness", "dropped",
                   "global_qps"]


@dataclass
class QpsMetrics:
    duration: float
    global_qps: float
    applied_qps: float
    processed_qps: float
    local_qps: dict[int, float] = field(default_factory=dict)
    pushed_by_worker: dict[int, int] = field(default_factory=dict)
    mean_staleness: float = 0.0
    max_staleness: int = 0
    dropped: int = 0
    stale_dropped: int = 0
    cancelled: int = 0
    rejected: int = 0
    steps: int = 0
    in_buffer: int = 0

    def as_dict(self) -> dict:
        data = asdict(self)
        data["local_qps"] = {str(k): v for k, v in self.local_qps.items()}
        data["pushed_by_worker"] = {str(k): v for k, v in self.pushed_by_worker.items()}
        return data


def _records_of(trace_or_records) -> list[dict]:
    records = getattr(trace_or_records, "records", trace_or_records)
    return [r for r in records if r.get("kind") != "summary"]


def qps_metrics(trace_or_records, n_workers: int | None = None) -> QpsMetrics:
    """Global QPS = applied samples / duration; local QPS = samples a worker pushed / duration."""
    records = _records_of(trace_or_records)
    if not records:
        raise ArgumentError("qps_metrics needs a non-empty trace")
    times = [float(r["t"]) for r in records]
    starts = [float(r["t0"]) for r in records if r.get("kind") == "epoch" and "t0" in r]
    start = min(starts + times)
    duration = max(times) - start

    applied_samples = 0
    staleness: list[int] = []
    stale_dropped = cancelled = rejected = steps = in_buffer = 0
    processed = 0
    local: dict[int, int] = {}
    pushes: dict[int, int] = {}
    if n_workers:
        local = {w: 0 for w in range(n_workers)}
        pushes = {w: 0 for w in range(n_workers)}
    for r in records:
        kind = r.get("kind")
        if kind == "apply":
            applied_samples += int(r.get("samples", 0))
            staleness.append(int(r["apply_step"]) - int(r["pull_step"]))
        elif kind == "drop":
            stale_dropped += 1
            staleness.append(int(r["apply_step"]) - int(r["pull_step"]))
        elif kind == "cancel":
            cancelled += 1
        elif kind == "reject":
            rejected += 1
        elif kind == "step":
            steps += 1
        elif kind == "epoch":
            in_buffer += int(r.get("in_buffer", 0))
        if kind in ("push", "reject", "ignore"):
            worker = int(r["worker"])
            samples = int(r.get("samples", 0))
            local[worker] = local.get(worker, 0) + samples
            pushes[worker] = pushes.get(worker, 0) + 1
            processed += samples

    def rate(x: float) -> float:
        return x / duration if duration > 0 else math.nan

    return QpsMetrics(
        duration=duration,
        global_qps=rate(applied_samples),
        applied_qps=rate(applied_samples),
        processed_qps=rate(processed),
        local_qps={w: rate(s) for w, s in sorted(local.items())},
        pushed_by_worker=dict(sorted(pushes.items())),
        mean_staleness=float(np.mean(staleness)) if staleness else 0.0,
        max_staleness=int(max(staleness)) if staleness else 0,
        dropped=stale_dropped + cancelled,
        stale_dropped=stale_dropped,
        cancelled=cancelled,
        rejected=rejected,
        steps=steps,
        in_buffer=in_buffer,
    )


def summarize_records(records: list[dict], n_workers: int | None = None) -> dict:
    return qps_metrics(records, n_workers).as_dict()


def metrics_frame(trace_or_records) -> pd.DataFrame:
    """One row per applied step, with the fixed METRICS_COLUMNS header."""
    records = _records_of(trace_or_records)
    rows = []
    start = None
    applied_samples = 0
    staleness: list[int] = []
    for r in records:
        kind = r.get("kind")
        if start is None:
            start = float(r.get("t0", r["t"])) if kind == "epoch" else float(r["t"])
        if kind in ("apply", "drop"):
            staleness.append(int(r["apply_step"]) - int(r["pull_step"]))
            if kind == "apply":
                applied_samples += int(r.get("samples", 0))
        elif kind == "step":
            elapsed = float(r["t"]) - start
            rows.append({
                "step": int(r["global_step"]),
                "epoch": int(r.get("epoch", 0)),
                "sim_time": float(r["t"]),
                "loss": r.get("loss", math.nan),
                "auc": r.get("auc", math.nan),
                "mean_staleness": float(np.mean(staleness)) if staleness else 0.0,
                "max_staleness": int(max(staleness)) if staleness else 0,
                "dropped": int(r.get("dropped", 0)) + int(r.get("cancelled", 0)),
                "global_qps": applied_samples / elapsed if elapsed > 0 else math.nan,
            })
            staleness = []
    return pd.DataFrame(rows, columns=METRICS_COLUMNS)


def staleness_table(trace_or_records) -> pd.DataFrame:
    """Histogram of per-entry data staleness (apply step minus pull step)."""
    records = _records_of(trace_or_records)
    values = [int(r["apply_step"]) - int(r["pull_step"]) for r in records if r.get("kind") in ("apply", "drop")]
    if not values:
        return pd.DataFrame(columns=["staleness", "count", "fraction"])
    counts = pd.Series(values).value_counts().sort_index()
    return pd.DataFrame({"staleness": counts.index.astype(int), "count": counts.values,
                         "fraction": counts.values / len(values)})
