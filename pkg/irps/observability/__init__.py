"""
Observability module for IRPS.

Provides optional MLflow tracking of inverse-rendering fits.
"""

from .mlflow_setup import setup_mlflow_tracking, track_fit

__all__ = ["setup_mlflow_tracking", "track_fit"]
