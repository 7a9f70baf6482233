"""
Error Handling Module

This module provides the exception hierarchy shared by every EdgeFM component,
plus a central handler that classifies, logs and tracks failures so the CLI
can turn them into diagnostics and exit codes.
"""

import traceback
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional


class ErrorSeverity(Enum):
    """Error severity levels."""

    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class ErrorCategory(Enum):
    """Error categories for classification."""

    CONFIGURATION = "configuration"
    VALIDATION = "validation"
    NUMERICAL = "numerical"
    PROTOCOL = "protocol"
    SIMULATION = "simulation"
    MODEL = "model"
    FILE_SYSTEM = "file_system"
    UNKNOWN = "unknown"


@dataclass
class ErrorInfo:
    """Structured error information with trace ID support."""

    error_id: str
    timestamp: str
    error_type: str
    category: ErrorCategory
    severity: ErrorSeverity
    message: str
    details: Dict[str, Any] = field(default_factory=dict)
    stack_trace: Optional[str] = None
    context: Dict[str, Any] = field(default_factory=dict)
    recovery_suggestions: List[str] = field(default_factory=list)
    user_message: Optional[str] = None
    trace_id: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary."""
        result = {
            "error_id": self.error_id,
            "timestamp": self.timestamp,
            "error_type": self.error_type,
            "category": self.category.value,
            "severity": self.severity.value,
            "message": self.message,
            "details": self.details,
            "context": self.context,
            "recovery_suggestions": self.recovery_suggestions,
            "user_message": self.user_message,
        }
        if self.trace_id:
            result["trace_id"] = self.trace_id
        return result

    def get_user_friendly_message(self) -> str:
        """Get user-friendly error message with its error ID."""
        base_message = self.user_message or self.message
        return f"{base_message} (Error ID: {self.error_id})"


class EdgeFMError(Exception):
    """Base exception class for EdgeFM."""

    def __init__(
        self,
        message: str,
        category: ErrorCategory = ErrorCategory.UNKNOWN,
        severity: ErrorSeverity = ErrorSeverity.MEDIUM,
        details: Optional[Dict[str, Any]] = None,
        recovery_suggestions: Optional[List[str]] = None,
        user_message: Optional[str] = None,
    ):
        super().__init__(message)
        self.category = category
        self.severity = severity
        self.details = details or {}
        self.recovery_suggestions = recovery_suggestions or []
        self.user_message = user_message or message


class ConfigurationError(EdgeFMError):
    """Configuration-related errors."""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, category=ErrorCategory.CONFIGURATION, **kwargs)


class ValidationError(EdgeFMError):
    """Invalid arguments to a domain operation."""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, category=ErrorCategory.VALIDATION, **kwargs)


class NumericalError(EdgeFMError):
    """Degenerate or non-finite numerical state."""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, category=ErrorCategory.NUMERICAL, **kwargs)


class ProtocolError(EdgeFMError):
    """Wire protocol violations."""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, category=ErrorCategory.PROTOCOL, **kwargs)


class SimulationError(EdgeFMError):
    """Scenario and simulator errors."""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, category=ErrorCategory.SIMULATION, **kwargs)


class ModelError(EdgeFMError):
    """Model pool, selection and checkpoint errors."""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, category=ErrorCategory.MODEL, **kwargs)


class FileSystemError(EdgeFMError):
    """File system-related errors."""

    def __init__(self, message: str, **kwargs):
        super().__init__(message, category=ErrorCategory.FILE_SYSTEM, **kwargs)


# Embedding arithmetic and pools


class ZeroVectorError(NumericalError):
    """A vector with (near) zero norm cannot be normalized."""


class DimensionMismatchError(ValidationError):
    """Vectors of different dimensions were combined."""


class DuplicateClassError(ValidationError):
    """A class name is already present in the pool."""


class EmptyPoolError(ValidationError):
    """An operation needed at least one pool entry."""


class PromptTemplateError(ValidationError):
    """A prompt template must contain exactly one class placeholder."""


# Synthetic world and training


class UnknownClassError(ValidationError):
    """The class does not exist in the synthetic world."""


class InvalidConfigError(ConfigurationError):
    """Parameters outside their valid range."""


class NonPositiveTemperatureError(ValidationError):
    """Contrastive temperature must be strictly positive."""


class TrainingDivergedError(NumericalError):
    """Training produced non-finite parameters."""


class CheckpointError(ModelError):
    """A model checkpoint could not be encoded or decoded."""


# Model selection


class DuplicateArchError(ModelError):
    """An architecture id is already registered."""


class NoFeasibleModelError(ModelError):
    """No registered architecture fits the device budgets."""


# Network adaptation


class EmptyCalibrationError(ValidationError):
    """A threshold table needs a non-empty calibration set."""


class NonPositiveBandwidthError(ValidationError):
    """Bandwidth must be strictly positive."""


class NonPositiveMeasurementError(ValidationError):
    """A bandwidth probe reported a non-positive rate."""


class TraceFormatError(FileSystemError):
    """A bandwidth trace file is malformed."""


# Wire protocol


class BadMagicError(ProtocolError):
    """Frame does not start with the protocol magic."""


class UnknownTypeError(ProtocolError):
    """Frame carries an unregistered message type."""


class TruncatedError(ProtocolError):
    """Frame or payload ended early."""


class OversizeError(ProtocolError):
    """Payload exceeds the maximum frame size."""


# Simulation


class ScenarioError(SimulationError):
    """Scenario definition is malformed."""


class InvariantViolationError(SimulationError):
    """A runtime invariant failed during a run."""

    def __init__(self, message: str, violations: Optional[List[str]] = None, **kwargs):
        super().__init__(message, severity=ErrorSeverity.HIGH, **kwargs)
        self.violations = violations or []


class ErrorHandler:
    """Central error handling and tracking."""

    def __init__(self, max_history: int = 1000):
        self.error_history: List[ErrorInfo] = []
        self.error_counts: Dict[str, int] = {}
        self.max_history = max_history
        self.recovery_strategies = self._init_recovery_strategies()

    def _init_recovery_strategies(self) -> Dict[ErrorCategory, List[str]]:
        """Initialize recovery strategies for different error categories."""
        return {
            ErrorCategory.CONFIGURATION: [
                "Check the TOML configuration file syntax and values",
                "Check EDGEFM_* environment variable overrides",
            ],
            ErrorCategory.VALIDATION: [
                "Check vector dimensions and pool contents",
                "Verify parameter ranges",
            ],
            ErrorCategory.NUMERICAL: [
                "Lower the learning rate",
                "Check inputs for zero or non-finite vectors",
            ],
            ErrorCategory.PROTOCOL: [
                "Check that both peers run the same protocol version",
                "Inspect the frame header for corruption",
            ],
            ErrorCategory.SIMULATION: [
                "Check scenario schedule times against the duration",
                "Check the bandwidth trace file",
            ],
            ErrorCategory.MODEL: [
                "Relax the device memory or FLOPS budget",
                "Register a model for the profile's task tag",
            ],
            ErrorCategory.FILE_SYSTEM: [
                "Check file paths and permissions",
                "Create missing directories",
            ],
        }

    def handle_error(
        self,
        error: Exception,
        context: Optional[Dict[str, Any]] = None,
        trace_id: Optional[str] = None,
    ) -> ErrorInfo:
        """Handle and log an error with trace ID support."""
        from src.structured_logger import LogContext, get_logger, get_trace_id

        if not trace_id:
            trace_id = get_trace_id()

        timestamp_str = datetime.now().strftime("%Y%m%d_%H%M%S")
        if trace_id:
            error_id = f"ERR_{timestamp_str}_{trace_id[:8]}_{id(error) % 10000:04d}"
        else:
            error_id = f"ERR_{timestamp_str}_{id(error) % 10000:04d}"

        if isinstance(error, EdgeFMError):
            category = error.category
            severity = error.severity
            user_message = error.user_message
            details = dict(error.details)
            recovery_suggestions = error.recovery_suggestions or self.recovery_strategies.get(
                category, []
            )
        else:
            category = self._classify_error(error)
            severity = self._assess_severity(error)
            user_message = str(error)
            details = {}
            recovery_suggestions = self.recovery_strategies.get(category, [])

        error_info = ErrorInfo(
            error_id=error_id,
            timestamp=datetime.now().isoformat(),
            error_type=type(error).__name__,
            category=category,
            severity=severity,
            message=str(error),
            details=details,
            stack_trace="".join(
                traceback.format_exception(type(error), error, error.__traceback__)
            ),
            context=context or {},
            recovery_suggestions=recovery_suggestions,
            user_message=user_message,
            trace_id=trace_id,
        )

        logger = get_logger("edgefm.errors")
        log_context = LogContext(
            trace_id=trace_id,
            component="error_handler",
            operation="handle_error",
            metadata={
                "error_id": error_info.error_id,
                "error_type": error_info.error_type,
                "category": category.value,
                "severity": severity.value,
                "details": details,
                "context": error_info.context,
            },
        )
        log_message = f"[{error_info.error_id}] {category.value.upper()}: {error_info.message}"
        if severity == ErrorSeverity.CRITICAL:
            logger.critical(log_message, context=log_context)
        elif severity == ErrorSeverity.HIGH:
            logger.error(log_message, context=log_context)
        elif severity == ErrorSeverity.MEDIUM:
            logger.warning(log_message, context=log_context)
        else:
            logger.info(log_message, context=log_context)

        self._track_error(error_info)
        return error_info

    def _classify_error(self, error: Exception) -> ErrorCategory:
        """Classify foreign exceptions by type."""
        if isinstance(error, (FileNotFoundError, PermissionError, IsADirectoryError)):
            return ErrorCategory.FILE_SYSTEM
        if isinstance(error, (ConnectionError, TimeoutError)):
            return ErrorCategory.PROTOCOL
        if isinstance(error, (FloatingPointError, OverflowError, ZeroDivisionError)):
            return ErrorCategory.NUMERICAL
        if isinstance(error, (ValueError, TypeError, KeyError)):
            return ErrorCategory.VALIDATION
        return ErrorCategory.UNKNOWN

    def _assess_severity(self, error: Exception) -> ErrorSeverity:
        """Assess error severity."""
        if isinstance(error, (MemoryError, SystemError)):
            return ErrorSeverity.CRITICAL
        if isinstance(error, OSError):
            return ErrorSeverity.HIGH
        if isinstance(error, (ValueError, TypeError, KeyError, AttributeError)):
            return ErrorSeverity.MEDIUM
        return ErrorSeverity.LOW

    def _track_error(self, error_info: ErrorInfo) -> None:
        """Track error in history."""
        self.error_history.append(error_info)
        if len(self.error_history) > self.max_history:
            self.error_history = self.error_history[-self.max_history :]

        error_key = f"{error_info.category.value}:{error_info.error_type}"
        self.error_counts[error_key] = self.error_counts.get(error_key, 0) + 1

    def get_error_stats(self) -> Dict[str, Any]:
        """Get error statistics."""
        by_category: Dict[str, int] = {}
        by_severity: Dict[str, int] = {}
        for error in self.error_history:
            by_category[error.category.value] = by_category.get(error.category.value, 0) + 1
            by_severity[error.severity.value] = by_severity.get(error.severity.value, 0) + 1

        return {
            "total_errors": len(self.error_history),
            "by_category": by_category,
            "by_severity": by_severity,
            "error_counts": dict(self.error_counts),
        }

    def clear_error_history(self) -> None:
        """Clear error history."""
        self.error_history.clear()
        self.error_counts.clear()

    @contextmanager
    def error_context(self, context: Dict[str, Any]):
        """Context manager for error handling with additional context."""
        try:
            yield
        except Exception as e:
            self.handle_error(e, context)
            raise

    def create_user_friendly_message(self, error_info: ErrorInfo) -> str:
        """Create a user-friendly error message."""
        base_message = error_info.user_message or error_info.message
        suggestions = "\n".join(
            f"  - {suggestion}" for suggestion in error_info.recovery_suggestions[:3]
        )
        if suggestions:
            return f"{base_message}\n\nSuggested solutions:\n{suggestions}"
        return base_message


# Global error handler instance
_error_handler: Optional[ErrorHandler] = None


def get_error_handler() -> ErrorHandler:
    """Get the global error handler instance."""
    global _error_handler
    if _error_handler is None:
        _error_handler = ErrorHandler()
    return _error_handler


def handle_error(
    error: Exception,
    context: Optional[Dict[str, Any]] = None,
    trace_id: Optional[str] = None,
) -> ErrorInfo:
    """Handle an error using the global error handler."""
    return get_error_handler().handle_error(error, context, trace_id)


@contextmanager
def error_context(context: Dict[str, Any]):
    """Context manager for error handling with additional context."""
    with get_error_handler().error_context(context):
        yield
