"""Minimal MLflow tracking setup for inverse-rendering fits."""

import dataclasses
import logging
import os

import mlflow

from ..stream import LossTracker

EXPERIMENT = "irps"


def setup_mlflow_tracking() -> bool:
    """Configure MLflow from the environment; False when tracking is off"""
    # Suppress noisy MLflow / alembic logs
    for name in ("alembic", "mlflow"):
        logging.getLogger(name).setLevel(logging.ERROR)

    tracking_uri = os.getenv("MLFLOW_TRACKING_URI")
    enabled = os.getenv("IRPS_MLFLOW", "").strip().lower() in ("1", "true", "yes")
    if not tracking_uri and not enabled:
        return False
    if tracking_uri:
        mlflow.set_tracking_uri(tracking_uri)

    mlflow.set_experiment(EXPERIMENT)
    return True


def track_fit(cfg, trace, scene_name: str) -> None:
    """Log one fit's config and per-iteration losses as an MLflow run"""
    tracker = LossTracker(list(trace))
    with mlflow.start_run(run_name=scene_name):
        mlflow.log_params({k: str(v) for k, v in dataclasses.asdict(cfg).items()})
        for record, metrics in zip(tracker.records, tracker.as_metrics()):
            mlflow.log_metrics(metrics, step=record.iteration)
        summary = tracker.summary()
        if not summary.is_empty():
            mlflow.log_metric("L_rec_reduction", summary.reduction)
