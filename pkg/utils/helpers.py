import math
from typing import Optional, Union

Number = Union[int, float]


def _missing(value: Optional[Number]) -> bool:
    return value is None or (isinstance(value, float) and math.isnan(value))


def format_staleness(mean: Optional[Number], max_: Optional[Number]) -> str:
    """
    Staleness the way throughput tables print it: mean with the maximum in parentheses.

    Args:
        mean: average staleness over aggregated entries
        max_: largest staleness seen

    Returns:
        String like "0.21 (11)", or "Unknown" if either value is missing.
    """
    if _missing(mean) or _missing(max_):
        return "Unknown"
    return f"{float(mean):.2f} ({int(max_)})"


def format_qps(qps: Optional[Number]) -> str:
    """Samples per second with a K/M suffix, e.g. 3250 -> '3.25K'."""
    if _missing(qps):
        return "Unknown"
    qps = float(qps)
    for suffix, scale in (("M", 1e6), ("K", 1e3)):
        if abs(qps) >= scale:
            return f"{qps / scale:.2f}{suffix}"
    return f"{qps:.2f}"


def format_duration(seconds: Optional[Number]) -> str:
    """
    Simulated seconds as a short readable string.

    Returns:
        '42.0 s', '3.5 min' or '1.20 h'; 'Unknown' if missing.
    """
    if _missing(seconds):
        return "Unknown"
    seconds = float(seconds)
    if seconds < 120:
        return f"{seconds:.1f} s"
    if seconds < 7200:
        return f"{seconds / 60:.1f} min"
    return f"{seconds / 3600:.2f} h"


def run_status(steps: Optional[Number], dropped: Optional[Number]) -> str:
    """
    Badge for the runs table.

    Returns:
        '🟥 Empty' when no step was applied, '🟨 Drops' when gradients were dropped, else '🟩 Clean'.
    """
    if _missing(steps) or int(steps) == 0:
        return "🟥 Empty"
    if not _missing(dropped) and float(dropped) > 0:
        return "🟨 Drops"
    return "🟩 Clean"
