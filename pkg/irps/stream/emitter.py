"""
StreamEventEmitter - Unified event format

All events contain a type and associated data.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional


@dataclass
class StreamEvent:
    """Unified stream event"""
    type: str
    data: Dict[str, Any]


class StreamEventEmitter:
    """Stream event emitter"""

    @staticmethod
    def stage(name: str, detail: str = "") -> StreamEvent:
        """Stage start event"""
        return StreamEvent("stage", {"type": "stage", "name": name, "detail": detail})

    @staticmethod
    def stage_done(name: str, seconds: float, success: bool = True) -> StreamEvent:
        """Stage finished event"""
        return StreamEvent("stage_done", {
            "type": "stage_done",
            "name": name,
            "seconds": seconds,
            "success": success,
        })

    @staticmethod
    def progress(
        stage: str,
        step: int,
        total: Optional[int] = None,
        metrics: Optional[Dict[str, float]] = None,
    ) -> StreamEvent:
        """Progress event (fit iteration, nayar round, ...)"""
        return StreamEvent("progress", {
            "type": "progress",
            "stage": stage,
            "step": step,
            "total": total,
            "metrics": metrics or {},
        })

    @staticmethod
    def event(kind: str, iteration: int, detail: str = "") -> StreamEvent:
        """Schedule event (lr_drop, kernel_refresh)"""
        return StreamEvent("event", {"type": "event", "kind": kind, "iteration": iteration, "detail": detail})

    @staticmethod
    def warning(message: str) -> StreamEvent:
        """Warning event"""
        return StreamEvent("warning", {"type": "warning", "message": message})

    @staticmethod
    def result(name: str, path: str, content: str = "") -> StreamEvent:
        """Artifact written event"""
        return StreamEvent("result", {"type": "result", "name": name, "path": path, "content": content})

    @staticmethod
    def done(summary: Optional[Dict[str, Any]] = None) -> StreamEvent:
        """Done event"""
        return StreamEvent("done", {"type": "done", "summary": summary or {}})

    @staticmethod
    def error(message: str, stage: str = "") -> StreamEvent:
        """Error event"""
        return StreamEvent("error", {"type": "error", "message": message, "stage": stage})
