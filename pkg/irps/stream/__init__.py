"""
Stream submodule - Progress event processing

Provides:
- StreamEventEmitter: Event emitter
- StageTracker: Stage timing tracker
- LossTracker: Fit loss trace tracker
- ResultFormatter: Summary formatter
- Utility functions: truncate, format_seconds, get_status_symbol
- Constants: SUCCESS_PREFIX, FAILURE_PREFIX, DisplayLimits
"""

from .emitter import StreamEventEmitter, StreamEvent
from .tracker import StageTracker, StageInfo
from .loss_tracker import LossTracker, LossSummary
from .formatter import ResultFormatter, ContentType, FormattedResult
from .utils import (
    SUCCESS_PREFIX,
    FAILURE_PREFIX,
    STATUS_STYLES,
    StageStatus,
    DisplayLimits,
    truncate,
    format_seconds,
    get_status_symbol,
)

__all__ = [
    # Emitter
    "StreamEventEmitter",
    "StreamEvent",
    # Trackers
    "StageTracker",
    "StageInfo",
    "LossTracker",
    "LossSummary",
    # Formatter
    "ResultFormatter",
    "ContentType",
    "FormattedResult",
    # Utils
    "SUCCESS_PREFIX",
    "FAILURE_PREFIX",
    "STATUS_STYLES",
    "StageStatus",
    "DisplayLimits",
    "truncate",
    "format_seconds",
    "get_status_symbol",
]
