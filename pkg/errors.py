"""
Exception hierarchy shared by the numerical modules and the command-line runner.

Configuration problems map to exit code 2, numerical failures to exit code 3.
"""

import logging
from typing import Any, Dict, Optional

from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)


class ErrorDetail(BaseModel):
    """Structured error payload written to stderr by the CLI."""
    message: str
    type: str
    param: Optional[str] = None
    code: Optional[str] = None
    context: Dict[str, Any] = Field(default_factory=dict)


class LeafheatError(Exception):
    """Base class for every error raised by leafheat."""

    code = "leafheat_error"
    exit_code = 3

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_detail(self, param: Optional[str] = None) -> ErrorDetail:
        return ErrorDetail(
            message=self.message,
            type=type(self).__name__,
            param=param,
            code=self.code,
            context={k: _jsonable(v) for k, v in self.context.items()},
        )


class ConfigError(LeafheatError):
    code = "invalid_config"
    exit_code = 2


class NumericalError(LeafheatError):
    code = "numerical_failure"
    exit_code = 3


class LeafTracingError(NumericalError):
    """Fold-over, insufficient history, or a leaf that does not contain its base."""
    code = "leaf_tracing"


class BracketError(NumericalError):
    code = "bracket_no_convergence"


class RectangleError(NumericalError):
    code = "rectangle"


class SRBError(NumericalError):
    code = "srb"


class DomainError(NumericalError):
    """Empty interiors, improper leaf subsets and uncovered pullback nodes."""
    code = "domain"


class NonConformalError(NumericalError):
    code = "non_conformal"


class InsufficientSamplesError(NumericalError):
    code = "insufficient_samples"


def _jsonable(value: Any) -> Any:
    if hasattr(value, "tolist"):
        return value.tolist()
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return repr(value)
