# experiments/analyze.py
# Trace analyses: aggregate-norm distributions with a KS distance matrix,
# feature-ID occurrence histograms and staleness statistics.
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.stats import ks_2samp

from cluster.metrics import qps_metrics, staleness_table
from cluster.trace import Trace, load_trace
from core.datagen import id_histogram, id_rank_frame
from errors import ArgumentError, LoggingNotEnabledError

logger = logging.getLogger(__name__)

ANALYSES = ("grad-norm-dist", "id-histogram", "staleness")


def trace_label(path: str | Path) -> str:
    path = Path(path)
    summary = path.parent / "summary.json"
    if summary.exists():
        with summary.open("r", encoding="utf-8") as fh:
            return json.load(fh).get("mode_label", path.parent.name)
    return path.parent.name if path.stem == "trace" else path.stem


def applied_norms(trace: Trace) -> np.ndarray:
    steps = trace.of_kind("step")
    if not steps or any("norm" not in r for r in steps):
        raise LoggingNotEnabledError("trace has no aggregate norms; logging not enabled (output.log_norms)")
    return np.array([float(r["norm"]) for r in steps], dtype=np.float64)


def ks_matrix(samples: dict[str, np.ndarray]) -> pd.DataFrame:
    labels = list(samples)
    matrix = np.zeros((len(labels), len(labels)))
    for i, a in enumerate(labels):
        for j, b in enumerate(labels):
            if j > i:
                matrix[i, j] = matrix[j, i] = ks_2samp(samples[a], samples[b]).statistic
    return pd.DataFrame(matrix, index=labels, columns=labels)


def grad_norm_dist(traces: dict[str, Trace]) -> dict[str, pd.DataFrame]:
    samples = {label: applied_norms(trace) for label, trace in traces.items()}
    long = pd.concat(
        [pd.DataFrame({"trace": label, "step": np.arange(len(v)), "norm": v}) for label, v in samples.items()],
        ignore_index=True,
    )
    summary = pd.DataFrame([
        {"trace": label, "count": len(v), "mean": float(v.mean()), "std": float(v.std(ddof=1)) if len(v) > 1 else 0.0}
        for label, v in samples.items()
    ])
    return {"norms": long, "norm_summary": summary, "ks_matrix": ks_matrix(samples)}


def trace_id_histogram(trace: Trace) -> pd.DataFrame:
    pulls = [r for r in trace.of_kind("pull") if "ids" in r]
    if not pulls:
        raise LoggingNotEnabledError("trace has no per-batch IDs; logging not enabled (output.log_ids)")
    histogram = id_histogram(np.asarray(r["ids"]) for r in pulls)
    return id_rank_frame(histogram, total_batches=len(pulls))


def staleness_summary(traces: dict[str, Trace]) -> dict[str, pd.DataFrame]:
    tables = []
    rows = []
    for label, trace in traces.items():
        table = staleness_table(trace)
        table.insert(0, "trace", label)
        tables.append(table)
        metrics = qps_metrics(trace)
        rows.append({"trace": label, "mean_staleness": metrics.mean_staleness, "max_staleness": metrics.max_staleness,
                     "dropped": metrics.dropped, "global_qps": metrics.global_qps})
    return {"staleness": pd.concat(tables, ignore_index=True), "staleness_summary": pd.DataFrame(rows)}


def _unique_labels(paths: list[str | Path]) -> list[str]:
    labels = [trace_label(p) for p in paths]
    if len(set(labels)) == len(labels):
        return labels
    return [f"{i}:{label}" for i, label in enumerate(labels)]


def cmd_analyze(trace_paths: list[str | Path], analysis: str, out_dir: str | Path | None = None) -> dict[str, pd.DataFrame]:
    if analysis not in ANALYSES:
        raise ArgumentError(f"unknown analysis {analysis!r}; choose from {', '.join(ANALYSES)}")
    if not trace_paths:
        raise ArgumentError("analyze needs at least one trace")
    traces = {label: load_trace(path) for label, path in zip(_unique_labels(trace_paths), trace_paths)}

    if analysis == "grad-norm-dist":
        result = grad_norm_dist(traces)
    elif analysis == "id-histogram":
        result = {f"id_histogram_{i}": trace_id_histogram(t) for i, t in enumerate(traces.values())}
    else:
        result = staleness_summary(traces)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, frame in result.items():
            frame.to_csv(out / f"{name}.csv", index=name == "ks_matrix")
        logger.info(f"📦 {analysis} analysis written to {out}")
    return result
