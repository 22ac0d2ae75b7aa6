import streamlit as st

import settings


def sidebar() -> str:
    """Runs-directory picker plus the about section; returns the chosen directory."""
    if "runs_dir" not in st.session_state:
        st.session_state.runs_dir = settings.runs_dir()

    with st.sidebar:
        st.markdown("### 📂 Runs")
        runs_dir = st.text_input("Runs directory", value=st.session_state.runs_dir, key="runs_dir_input")
        st.session_state.runs_dir = runs_dir

        if st.button("🔁 Refresh", key="refresh_runs"):
            st.rerun()

        st.markdown("---")

        # ✅ About Section
        st.markdown("## 📘 About gbalab")
        st.info("_Token-controlled global-batch aggregation versus sync, async and the hybrid PS modes._")
        st.markdown(
            """
Runs are written by `python cli.py train` (or `switch-study`, `scale-study`).
Each run directory holds `summary.json`, `metrics.csv`, `eval.csv` and `trace.jsonl`.
            """
        )
    return runs_dir
