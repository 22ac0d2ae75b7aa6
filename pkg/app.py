import streamlit as st
import sys
import os

# ✅ Ensure local module imports work
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

# ✅ Import local components
import settings
from components.sidebar import sidebar
from components.run_overview import show_run, show_runs
from runstore import runs_frame

# ✅ Set app configuration
st.set_page_config(page_title="gbalab runs", layout="wide")
settings.configure_logging()

st.title("gbalab results")

runs_dir = sidebar()
runs = runs_frame(runs_dir)

# ✅ Routing: overview table, then one run in detail
if runs.empty:
    st.warning(f"⚠️ No runs found under {runs_dir}.")
else:
    show_runs(runs)
    st.markdown("---")
    selected = st.selectbox("🔍 Inspect Run", runs["run"].tolist(), key="selected_run")
    show_run(runs.loc[runs["run"] == selected, "path"].iloc[0])
