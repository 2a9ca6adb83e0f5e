"""
Base Service Class
==================

Shared wiring for all service implementations: a named structlog logger,
runtime settings and the numeric tolerance record.
"""

from abc import ABC
from typing import Optional

from ..core.config import NumericConfig, Settings, get_numeric_config, get_settings
from ..core.exceptions import InvalidArgumentError
from ..core.logging import get_logger


class BaseService(ABC):
    """Abstract base service class."""

    module: str = "cmdp-lab"

    def __init__(self, settings: Optional[Settings] = None, numeric: Optional[NumericConfig] = None):
        self.settings = settings or get_settings()
        self.numeric = numeric or get_numeric_config()
        self.logger = get_logger(self.__class__.__name__)

    def require(self, condition: bool, message: str, **context) -> None:
        """Raise a module-qualified InvalidArgumentError when ``condition`` is false."""
        if not condition:
            self.logger.error("Invalid argument", module=self.module, reason=message, **context)
            raise InvalidArgumentError(self.module, message)
