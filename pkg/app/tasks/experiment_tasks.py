"""Celery task running one experiment cell."""

from __future__ import annotations

import logging
from typing import Any, Dict

from celery import states

from app.models.schemas import ExperimentCell, ExperimentConfig
from app.services.experiments import run_cell
from app.tasks.celery_app import celery_app

logger = logging.getLogger(__name__)


@celery_app.task(bind=True, name="tasks.run_cell")
def run_cell_task(self, config_json: Dict[str, Any], cell_json: Dict[str, Any]) -> dict:
    """Run one (method, fold, seed, overrides) cell.

    Args:
        config_json: ExperimentConfig dumped in JSON mode.
        cell_json: ExperimentCell dumped in JSON mode.

    Returns:
        RunMetrics as a JSON-compatible dict.
    """
    config = ExperimentConfig.model_validate(config_json)
    cell = ExperimentCell.model_validate(cell_json)
    logger.info(
        "Starting cell %s: method=%s fold=%d repeat=%d",
        self.request.id, cell.method.value, cell.fold, cell.repeat,
    )
    if not self.request.is_eager:
        self.update_state(state="RUNNING", meta={"method": cell.method.value, "fold": cell.fold})

    try:
        metrics = run_cell(config, cell)
    except Exception as exc:
        logger.error("Cell %s failed: %s", self.request.id, exc, exc_info=True)
        if not self.request.is_eager:
            self.update_state(state=states.FAILURE, meta={"error": str(exc)})
        raise

    logger.info("Cell %s completed: AP=%.4f", self.request.id, metrics.ap)
    return metrics.model_dump(mode="json")
