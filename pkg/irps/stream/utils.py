"""
Display constants and small text helpers shared by the CLI and the formatter
"""

import sys
from enum import Enum


# Prefixes of status lines on the diagnostic stream
SUCCESS_PREFIX = "[OK]"
FAILURE_PREFIX = "[FAILED]"


class StageStatus(str, Enum):
    """Stage status; the symbol is the same dot in a different colour"""
    RUNNING = "running"
    SUCCESS = "success"
    ERROR = "error"
    PENDING = "pending"


_SYMBOLS = {
    StageStatus.RUNNING: "●",
    StageStatus.SUCCESS: "●",
    StageStatus.ERROR: "●",
    StageStatus.PENDING: "○",
}

_ASCII_SYMBOLS = {
    StageStatus.RUNNING: "*",
    StageStatus.SUCCESS: "+",
    StageStatus.ERROR: "x",
    StageStatus.PENDING: "-",
}

STATUS_STYLES = {
    StageStatus.RUNNING: "yellow",
    StageStatus.SUCCESS: "green",
    StageStatus.ERROR: "red",
    StageStatus.PENDING: "dim",
}


def _stdout_is_utf() -> bool:
    encoding = getattr(sys.stdout, "encoding", None) or ""
    return "utf" in encoding.lower()


def get_status_symbol(status: StageStatus) -> str:
    """Dot for the stage list; ASCII on terminals that cannot print it"""
    table = _SYMBOLS if _stdout_is_utf() else _ASCII_SYMBOLS
    return table.get(status, "?")


class DisplayLimits:
    """Display-related limits"""
    PROGRESS_EVERY = 10     # Fit iterations between live refreshes
    EVENTS_SHOWN = 8        # Schedule events kept in the live view
    MESSAGE = 300           # Error / warning length


def truncate(content: str, max_length: int, suffix: str = " ... (truncated)") -> str:
    if len(content) <= max_length:
        return content
    return content[:max_length] + suffix


def format_seconds(seconds: float) -> str:
    """1.2s / 3m 04s"""
    if seconds < 60:
        return f"{seconds:.1f}s"
    minutes, rest = divmod(int(round(seconds)), 60)
    return f"{minutes}m {rest:02d}s"
