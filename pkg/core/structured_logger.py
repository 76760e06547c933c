"""Structured logging with run correlation IDs."""

import json
import uuid
from typing import Any, Dict, Optional

from loguru import logger


class StructuredLogger:
    """Structured logger with run ID tracking."""

    def generate_run_id(self) -> str:
        """Generate unique run ID."""
        return str(uuid.uuid4())

    def log_stage_event(self, run_id: str, event: str, stage: str, **kwargs):
        """Log pipeline stage events with structured format."""
        log_data = {
            "run_id": run_id,
            "event": event,
            "stage": stage,
            **kwargs,
        }
        logger.info(json.dumps(log_data, default=str))

    def log_training_step(self, run_id: str, model: str, step: int, loss: float, **kwargs):
        """Log one optimizer step; emitted at debug level to keep long runs quiet."""
        log_data = {
            "run_id": run_id,
            "model": model,
            "step": step,
            "loss": loss,
            **kwargs,
        }
        logger.debug(json.dumps(log_data, default=str))

    def log_metrics(self, run_id: str, split: str, metrics: Dict[str, Any]):
        """Log evaluation metrics for a split."""
        log_data = {"run_id": run_id, "split": split, "metrics": metrics}
        logger.info(json.dumps(log_data, default=str))

    def log_error(self, run_id: str, error: str, stage: Optional[str] = None,
                  exit_code: Optional[int] = None, **kwargs):
        """Log errors with full context."""
        log_data = {
            "run_id": run_id,
            "error": error,
            **kwargs,
        }

        if stage:
            log_data["stage"] = stage
        if exit_code is not None:
            log_data["exit_code"] = exit_code

        logger.error(json.dumps(log_data, default=str))
