"""Centralized error handling: exceptions to process exit codes."""

from typing import Any, Callable, Optional, Tuple

from loguru import logger

from .exceptions import DataIOError, ReplicaError
from .structured_logger import StructuredLogger

EXIT_OK = 0
EXIT_IO = DataIOError.exit_code


class ErrorHandler:
    """Runs a pipeline command and maps failures to exit codes."""

    def __init__(self, run_id: Optional[str] = None, stage: Optional[str] = None):
        self.structured = StructuredLogger()
        self.run_id = run_id or self.structured.generate_run_id()
        self.stage = stage

    def exit_code_for(self, error: BaseException) -> int:
        if isinstance(error, ReplicaError):
            return error.exit_code
        if isinstance(error, OSError):
            return EXIT_IO
        return 1

    def run(self, func: Callable, *args, **kwargs) -> Tuple[int, Any]:
        """Execute ``func``; returns ``(exit_code, result)``.

        Known failures are logged and converted; anything else propagates.
        """
        try:
            return EXIT_OK, func(*args, **kwargs)
        except (ReplicaError, OSError) as e:
            code = self.exit_code_for(e)
            details = getattr(e, "details", None) or {}
            self.structured.log_error(
                self.run_id,
                str(e),
                stage=self.stage,
                exit_code=code,
                error_type=type(e).__name__,
                error_code=getattr(e, "error_code", None),
                **{f"detail_{k}": v for k, v in details.items() if isinstance(v, (str, int, float, bool))},
            )
            logger.debug("Command failed", extra={"exit_code": code})
            return code, None
