"""
ResultFormatter - Run summary formatter

Turns status lines, stage timings and loss summaries into rich renderables.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, List, Optional

from rich.panel import Panel
from rich.table import Table
from rich.text import Text

from .loss_tracker import LossSummary
from .tracker import StageInfo
from .utils import FAILURE_PREFIX, STATUS_STYLES, SUCCESS_PREFIX, format_seconds, get_status_symbol, truncate


class ContentType(Enum):
    """Content type"""
    SUCCESS = "success"
    ERROR = "error"
    TEXT = "text"


@dataclass
class FormattedResult:
    """Formatted result"""
    content_type: ContentType
    elements: List[Any]  # Rich renderable elements
    success: bool = True


class ResultFormatter:
    """Result formatter

    Usage example:
        formatter = ResultFormatter()
        result = formatter.format("solve", "[OK] wrote 4 artifacts")
        for elem in result.elements:
            console.print(elem)
    """

    def detect_type(self, content: str) -> ContentType:
        content = content.strip()
        if content.startswith(SUCCESS_PREFIX):
            return ContentType.SUCCESS
        if content.startswith(FAILURE_PREFIX):
            return ContentType.ERROR
        return ContentType.TEXT

    def format(self, name: str, content: str, max_length: int = 300) -> FormattedResult:
        content_type = self.detect_type(content)
        display = truncate(content, max_length)
        if content_type is ContentType.TEXT:
            elements = [Text(f"{name}: ", style="cyan bold") + Text(display, style="dim")]
            return FormattedResult(content_type, elements, True)
        style = "green" if content_type is ContentType.SUCCESS else "red"
        elements = [Panel(Text(display, style=style), title=name, border_style=style)]
        return FormattedResult(content_type, elements, content_type is ContentType.SUCCESS)

    def stage_table(self, stages: list[StageInfo]) -> Table:
        """One row per stage: status dot, name, detail, duration"""
        table = Table(show_header=True, header_style="bold", box=None, pad_edge=False)
        table.add_column("", width=2)
        table.add_column("stage")
        table.add_column("detail", style="dim")
        table.add_column("time", justify="right")
        for info in stages:
            symbol = Text(get_status_symbol(info.status), style=STATUS_STYLES[info.status])
            seconds = "" if info.seconds is None else format_seconds(info.seconds)
            table.add_row(symbol, info.name, info.detail, seconds)
        return table

    def loss_table(self, summary: LossSummary) -> Optional[Table]:
        """Initial / final / best reconstruction loss of a fit"""
        if summary.is_empty():
            return None
        table = Table(title="Fit", show_header=True, header_style="bold")
        table.add_column("iterations", justify="right")
        table.add_column("L_rec initial", justify="right")
        table.add_column("L_rec final", justify="right")
        table.add_column("best (iter)", justify="right")
        table.add_column("final / initial", justify="right")
        ratio = summary.reduction
        table.add_row(
            str(summary.iterations),
            f"{summary.initial_rec:.4g}",
            f"{summary.final_rec:.4g}",
            f"{summary.best_rec:.4g} ({summary.best_iteration})",
            "-" if math.isnan(ratio) else f"{ratio:.3f}",
        )
        return table

    def artifact_table(self, artifacts: list[tuple[str, str]]) -> Optional[Table]:
        if not artifacts:
            return None
        table = Table(title="Artifacts", show_header=True, header_style="bold")
        table.add_column("name")
        table.add_column("path", style="dim")
        for name, path in artifacts:
            table.add_row(name, path)
        return table
