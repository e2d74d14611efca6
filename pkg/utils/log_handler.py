"""
Logging handler that captures run messages for the report
"""
import logging
from typing import List


class ReportLogHandler(logging.Handler):
    """Collects formatted log lines so a run can embed its own log."""

    def __init__(self, level: int = logging.INFO):
        super().__init__(level)
        self._active = True
        self.lines: List[str] = []
        self.setFormatter(logging.Formatter('%(message)s'))

    def emit(self, record):
        """Store the formatted record"""
        if not self._active:
            return
        try:
            self.lines.append(self.format(record))
        except Exception:
            self.handleError(record)

    def drain(self) -> List[str]:
        lines, self.lines = self.lines, []
        return lines

    def close(self):
        """Stop capturing and close the handler"""
        self._active = False
        super().close()
