import json

import streamlit as st
import pandas as pd

from runstore import read_eval, read_metrics, read_staleness, read_summary
from utils.helpers import format_duration, format_qps, format_staleness, run_status


def runs_table(runs: pd.DataFrame) -> pd.DataFrame:
    """Display copy of the runs frame with formatted columns and a status badge."""
    df = runs.copy()
    df["status"] = [run_status(s, d) for s, d in zip(df["steps"], df["dropped"])]
    df["global_qps"] = df["global_qps"].apply(format_qps)
    df["avg_staleness_max"] = [format_staleness(m, x) for m, x in zip(df["mean_staleness"], df["max_staleness"])]
    return df.rename(columns={
        "run": "Run",
        "mode": "Mode",
        "global_batch": "Global Batch",
        "seed": "Seed",
        "steps": "Steps",
        "final_loss": "Final Loss",
        "final_auc": "Final AUC",
        "global_qps": "Global QPS",
        "avg_staleness_max": "Avg. Staleness (max)",
        "dropped": "Dropped",
        "status": "Status",
    })[["Run", "Status", "Mode", "Global Batch", "Seed", "Steps", "Final Loss", "Final AUC", "Global QPS",
        "Avg. Staleness (max)", "Dropped"]]


def show_runs(runs: pd.DataFrame):
    st.subheader("All Runs")
    mode_filter = st.selectbox("📂 Filter by Mode", ["All"] + sorted(runs["mode"].dropna().unique().tolist()))
    filtered = runs if mode_filter == "All" else runs[runs["mode"] == mode_filter]
    st.dataframe(runs_table(filtered).reset_index(drop=True), use_container_width=True)


def show_run(run_dir: str):
    try:
        summary = read_summary(run_dir)
    except (OSError, json.JSONDecodeError) as e:
        st.error(f"❌ Failed to load run: {e}")
        return

    metrics = summary.get("metrics", {})
    st.subheader(f"{summary.get('mode_label', 'Unknown')} (seed {summary.get('seed')})")
    cols = st.columns(4)
    cols[0].metric("Steps", summary.get("steps", 0))
    cols[1].metric("Global QPS", format_qps(metrics.get("global_qps")))
    cols[2].metric("Avg. Staleness (max)", format_staleness(metrics.get("mean_staleness"), metrics.get("max_staleness")))
    cols[3].metric("Simulated Time", format_duration(metrics.get("duration")))

    tabs = st.tabs(["📈 Metrics", "🧪 Evaluation", "⏱️ Staleness", "⚙️ Summary"])

    # --- METRICS TAB ---
    with tabs[0]:
        try:
            frame = read_metrics(run_dir)
        except (OSError, pd.errors.EmptyDataError):
            st.info("No metrics.csv for this run.")
        else:
            if frame["loss"].notna().any():
                st.line_chart(frame, x="step", y="loss")
            st.dataframe(frame, use_container_width=True)

    # --- EVAL TAB ---
    with tabs[1]:
        try:
            st.dataframe(read_eval(run_dir), use_container_width=True)
        except (OSError, pd.errors.EmptyDataError):
            st.info("No eval.csv for this run.")

    # --- STALENESS TAB ---
    with tabs[2]:
        table = read_staleness(run_dir)
        if table.empty:
            st.info("No aggregated entries in this trace.")
        else:
            st.dataframe(table, use_container_width=True)
        local = metrics.get("local_qps", {})
        if local:
            st.markdown("**Local QPS per worker**")
            st.dataframe(pd.DataFrame({"worker": list(local), "local_qps": list(local.values())}),
                         use_container_width=True)

    # --- SUMMARY TAB ---
    with tabs[3]:
        st.json(summary)
