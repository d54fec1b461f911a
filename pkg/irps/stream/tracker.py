"""
StageTracker - Pipeline stage tracker

Records when each stage starts and finishes so the CLI can show durations.
"""

import time
from dataclasses import dataclass, field
from typing import Dict, Optional

from .utils import StageStatus


@dataclass
class StageInfo:
    """Stage information"""
    name: str
    detail: str = ""
    status: StageStatus = StageStatus.RUNNING
    started: float = field(default_factory=time.perf_counter)
    seconds: Optional[float] = None


class StageTracker:
    """Stage tracker

    Usage example:
        tracker = StageTracker()
        tracker.start("solve", "woodham")
        ...
        info = tracker.finish("solve")
        yield emitter.stage_done(info.name, info.seconds)
    """

    def __init__(self):
        self._stages: Dict[str, StageInfo] = {}
        self._order: list[str] = []

    def start(self, name: str, detail: str = "") -> StageInfo:
        """Start (or restart) a stage"""
        info = StageInfo(name=name, detail=detail)
        if name not in self._stages:
            self._order.append(name)
        self._stages[name] = info
        return info

    def finish(self, name: str, success: bool = True) -> StageInfo:
        """Mark a stage finished and record its duration"""
        info = self._stages.get(name)
        if info is None:
            raise KeyError(f"stage {name!r} was never started")
        info.seconds = time.perf_counter() - info.started
        info.status = StageStatus.SUCCESS if success else StageStatus.ERROR
        return info

    def get(self, name: str) -> Optional[StageInfo]:
        return self._stages.get(name)

    def running(self) -> list[StageInfo]:
        """Stages started but not finished"""
        return [self._stages[n] for n in self._order if self._stages[n].status == StageStatus.RUNNING]

    def get_all(self) -> list[StageInfo]:
        """All stages in start order"""
        return [self._stages[n] for n in self._order]

    def total_seconds(self) -> float:
        return sum(info.seconds or 0.0 for info in self._stages.values())

    def clear(self) -> None:
        self._stages.clear()
        self._order.clear()
