"""
IRPS error hierarchy

Library code raises these; only the CLI turns them into exit codes.
"""

from typing import Optional


class IrpsError(Exception):
    """Root of all toolkit errors"""


class ConfigError(IrpsError):
    """Invalid scene / fit configuration or command-line usage"""


class DatasetError(IrpsError):
    """Unreadable or inconsistent dataset on disk"""


class DegenerateLightsError(IrpsError):
    """Light matrix does not span 3-D space"""


class CalibrationError(IrpsError):
    """Light calibration from a sphere failed"""


class GeometryError(IrpsError):
    """Invalid geometry (empty facet set, coincident facets, ...)"""


class AutodiffError(IrpsError):
    """Misuse of the tape (shape mismatch, loss not recorded, ...)"""


class SolverError(IrpsError):
    """A reconstruction stage failed

    Attributes:
        stage: Name of the pipeline stage that failed, if known
    """

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.stage = stage

    def __str__(self) -> str:
        msg = super().__str__()
        return f"{self.stage}: {msg}" if self.stage else msg
