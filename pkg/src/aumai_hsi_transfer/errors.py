"""Failure taxonomy for aumai-hsi-transfer: error kinds, exceptions, exit codes."""

from __future__ import annotations

import json
from datetime import datetime, timezone
from typing import Final

import pydantic

from aumai_hsi_transfer.models import ErrorCategory, ErrorKind

# ---------------------------------------------------------------------------
# Registry of failure kinds, one per category
# ---------------------------------------------------------------------------

_RAW_KINDS: Final[list[dict[str, object]]] = [
    {"category": ErrorCategory.contract, "exit_code": 1, "retryable": False,
     "description": "An internal calling contract was violated (e.g. a stale activation trace)."},
    {"category": ErrorCategory.config, "exit_code": 2, "retryable": False,
     "description": "A configuration value is missing, malformed or out of range."},
    {"category": ErrorCategory.validation, "exit_code": 2, "retryable": False,
     "description": "A value violates a domain invariant (e.g. label exceeds class count)."},
    {"category": ErrorCategory.split, "exit_code": 2, "retryable": False,
     "description": "A train/test split cannot satisfy its constraints."},
    {"category": ErrorCategory.label, "exit_code": 2, "retryable": False,
     "description": "A class label lies outside the valid range."},
    {"category": ErrorCategory.batch, "exit_code": 2, "retryable": False,
     "description": "A batch is too small for the requested operation."},
    {"category": ErrorCategory.numeric, "exit_code": 3, "retryable": False,
     "description": "A non-finite value appeared in a gradient or tensor."},
    {"category": ErrorCategory.divergence, "exit_code": 3, "retryable": True,
     "description": "Training diverged: the loss became non-finite."},
    {"category": ErrorCategory.io, "exit_code": 4, "retryable": True,
     "description": "A file could not be read or written."},
    {"category": ErrorCategory.format, "exit_code": 4, "retryable": False,
     "description": "A file does not follow its binary container format."},
    {"category": ErrorCategory.surgery, "exit_code": 5, "retryable": False,
     "description": "Transfer surgery produced incompatible shapes at the junction."},
    {"category": ErrorCategory.dimension, "exit_code": 6, "retryable": False,
     "description": "Array shapes or model geometry do not match."},
    {"category": ErrorCategory.evaluation, "exit_code": 6, "retryable": False,
     "description": "Evaluation cannot be performed on the given data."},
]


def _build_registry() -> dict[ErrorCategory, ErrorKind]:
    """Build the kind registry from the raw definitions."""
    registry: dict[ErrorCategory, ErrorKind] = {}
    for raw in _RAW_KINDS:
        kind = ErrorKind.model_validate(raw)
        registry[kind.category] = kind
    return registry


ERROR_KINDS: Final[dict[ErrorCategory, ErrorKind]] = _build_registry()


def lookup_kind(category: ErrorCategory) -> ErrorKind:
    """Return the :class:`ErrorKind` registered for *category*."""
    return ERROR_KINDS[category]


# ---------------------------------------------------------------------------
# Exceptions
# ---------------------------------------------------------------------------


class HsiError(Exception):
    """Base class for every failure raised by this package."""

    category: ErrorCategory = ErrorCategory.contract

    def __init__(self, message: str) -> None:
        self.kind = lookup_kind(self.category)
        super().__init__(message)

    @property
    def exit_code(self) -> int:
        return self.kind.exit_code


class ContractError(HsiError):
    category = ErrorCategory.contract


class ConfigError(HsiError):
    category = ErrorCategory.config


class ValidationError(HsiError):
    category = ErrorCategory.validation


class SplitError(HsiError):
    category = ErrorCategory.split


class LabelError(HsiError):
    category = ErrorCategory.label


class BatchError(HsiError):
    category = ErrorCategory.batch


class NumericError(HsiError):
    category = ErrorCategory.numeric


class DivergenceError(HsiError):
    """Raised when the training loss stops being finite."""

    category = ErrorCategory.divergence

    def __init__(self, epoch: int, batch: int, loss: float) -> None:
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"loss became {loss!r} at epoch {epoch}, batch {batch}")


class IoError(HsiError):
    category = ErrorCategory.io


class FormatError(HsiError):
    category = ErrorCategory.format


class LengthError(FormatError):
    """Payload shorter or longer than its header declares."""


class ShapeError(FormatError):
    """Stored tensor shape disagrees with the shape implied by its spec."""


class SurgeryError(HsiError):
    category = ErrorCategory.surgery


class DimensionError(HsiError):
    category = ErrorCategory.dimension


class EvaluationError(HsiError):
    category = ErrorCategory.evaluation


# ---------------------------------------------------------------------------
# Classification of foreign exceptions
# ---------------------------------------------------------------------------

# Subclasses must precede their parents so isinstance() picks the most
# specific entry first.
_EXCEPTION_CATEGORY_MAP: Final[list[tuple[type[BaseException], ErrorCategory]]] = [
    (pydantic.ValidationError, ErrorCategory.config),
    (json.JSONDecodeError, ErrorCategory.config),
    (FileNotFoundError, ErrorCategory.io),
    (PermissionError, ErrorCategory.io),
    (OSError, ErrorCategory.io),
    (FloatingPointError, ErrorCategory.numeric),
    (OverflowError, ErrorCategory.numeric),
    (MemoryError, ErrorCategory.io),
    (UnicodeDecodeError, ErrorCategory.format),
    (KeyError, ErrorCategory.config),
    (ValueError, ErrorCategory.validation),
]


def classify_exception(exc: BaseException) -> ErrorKind:
    """Map any exception instance to the closest :class:`ErrorKind`.

    Package exceptions carry their own kind; anything unmapped falls back to
    the contract kind.
    """
    if isinstance(exc, HsiError):
        return exc.kind
    for exc_type, category in _EXCEPTION_CATEGORY_MAP:
        if isinstance(exc, exc_type):
            return lookup_kind(category)
    return lookup_kind(ErrorCategory.contract)


def exit_code_for(exc: BaseException) -> int:
    """Return the process exit code the CLI uses for *exc*."""
    return classify_exception(exc).exit_code


def create_error_response(exc: BaseException) -> dict[str, object]:
    """Return a JSON-serialisable error report for *exc*."""
    kind = classify_exception(exc)
    return {
        "error": {
            "category": kind.category.value,
            "exit_code": kind.exit_code,
            "type": type(exc).__name__,
            "message": str(exc),
            "description": kind.description,
            "retryable": kind.retryable,
            "timestamp": datetime.now(tz=timezone.utc).isoformat(),
        }
    }


__all__ = [
    "ERROR_KINDS",
    "BatchError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DivergenceError",
    "EvaluationError",
    "FormatError",
    "HsiError",
    "IoError",
    "LabelError",
    "LengthError",
    "NumericError",
    "ShapeError",
    "SplitError",
    "SurgeryError",
    "ValidationError",
    "classify_exception",
    "create_error_response",
    "exit_code_for",
    "lookup_kind",
]
