# settings.py
# Process-level settings read from the environment (and an optional .env file)
import logging
import os

from dotenv import load_dotenv

load_dotenv()

DEFAULT_OUTPUT_DIR = "runs"
DEFAULT_LIVE_TIME_SCALE = 0.001


def output_dir() -> str:
    return os.getenv("GBALAB_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)


def runs_dir() -> str:
    return os.getenv("GBALAB_RUNS_DIR", output_dir())


def log_level() -> str:
    return os.getenv("GBALAB_LOG_LEVEL", "INFO").upper()


def live_time_scale() -> float:
    """Wall seconds slept per simulated second by the live runner."""
    raw = os.getenv("GBALAB_LIVE_TIME_SCALE")
    if raw is None or raw == "":
        return DEFAULT_LIVE_TIME_SCALE
    try:
        return max(float(raw), 0.0)
    except ValueError:
        logging.getLogger(__name__).warning(f"⚠️ Ignoring GBALAB_LIVE_TIME_SCALE={raw!r}")
        return DEFAULT_LIVE_TIME_SCALE


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=getattr(logging, (level or log_level()).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
