"""Line-oriented logging with step prefixes."""

import logging
import sys
from pathlib import Path
from typing import Any, MutableMapping, Optional, Tuple, Union

LOG_FORMAT = "%(asctime)s %(levelname)s [%(step)s] %(name)s: %(message)s"


class _StepDefault(logging.Filter):
    """Give records logged outside a step an empty step field."""

    def filter(self, record: logging.LogRecord) -> bool:
        if not hasattr(record, "step"):
            record.step = "-"
        return True


def setup_logging(
    level: Union[int, str] = logging.INFO, log_file: Optional[Union[str, Path]] = None
) -> logging.Logger:
    """Configure the ``pytsr`` logger hierarchy; safe to call more than once."""
    root = logging.getLogger("pytsr")
    root.setLevel(level)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    handlers: list = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler.addFilter(_StepDefault())
        root.addHandler(handler)
    root.propagate = False
    return root


class StepAdapter(logging.LoggerAdapter):
    """Adds the current pipeline step to every record."""

    def process(
        self, msg: Any, kwargs: MutableMapping[str, Any]
    ) -> Tuple[Any, MutableMapping[str, Any]]:
        extra = dict(kwargs.get("extra") or {})
        extra.setdefault("step", (self.extra or {}).get("step", "-"))
        kwargs["extra"] = extra
        return msg, kwargs


def step_logger(name: str, step: str) -> StepAdapter:
    """Logger that tags every record with the given pipeline step."""
    return StepAdapter(logging.getLogger(name), {"step": step})
