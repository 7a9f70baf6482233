"""
Unit tests for the error handling module.
"""

import pytest

from src.error_handler import (
    BadMagicError,
    EdgeFMError,
    ErrorCategory,
    ErrorHandler,
    ErrorSeverity,
    InvalidConfigError,
    InvariantViolationError,
    ProtocolError,
    ZeroVectorError,
    error_context,
    get_error_handler,
    handle_error,
)
from src.structured_logger import TraceManager


@pytest.mark.unit
class TestExceptionHierarchy:
    """Test categories carried by domain exceptions."""

    @pytest.mark.parametrize(
        "error,category",
        [
            (ZeroVectorError("zero"), ErrorCategory.NUMERICAL),
            (InvalidConfigError("bad"), ErrorCategory.CONFIGURATION),
            (BadMagicError("magic"), ErrorCategory.PROTOCOL),
            (InvariantViolationError("broken"), ErrorCategory.SIMULATION),
        ],
    )
    def test_categories(self, error, category):
        assert error.category is category
        assert isinstance(error, EdgeFMError)

    def test_protocol_errors_share_a_base(self):
        assert issubclass(BadMagicError, ProtocolError)

    def test_invariant_violations_listed(self):
        error = InvariantViolationError("2 violations", violations=["a", "b"])
        assert error.violations == ["a", "b"]
        assert error.severity is ErrorSeverity.HIGH

    def test_user_message_defaults_to_message(self):
        assert EdgeFMError("plain").user_message == "plain"


@pytest.mark.unit
class TestErrorHandler:
    """Test classification, tracking and user-facing messages."""

    def test_domain_error_info(self):
        handler = ErrorHandler()
        info = handler.handle_error(
            InvalidConfigError("bad lambda", details={"key": "train.lam"}, recovery_suggestions=["Use 0.5"])
        )
        assert info.category is ErrorCategory.CONFIGURATION
        assert info.error_type == "InvalidConfigError"
        assert info.details == {"key": "train.lam"}
        assert info.recovery_suggestions == ["Use 0.5"]
        assert info.error_id.startswith("ERR_")

    def test_foreign_errors_classified(self):
        handler = ErrorHandler()
        assert handler.handle_error(FileNotFoundError("x")).category is ErrorCategory.FILE_SYSTEM
        assert handler.handle_error(ConnectionResetError("x")).category is ErrorCategory.PROTOCOL
        assert handler.handle_error(ZeroDivisionError("x")).category is ErrorCategory.NUMERICAL
        assert handler.handle_error(KeyError("x")).category is ErrorCategory.VALIDATION
        assert handler.handle_error(RuntimeError("x")).category is ErrorCategory.UNKNOWN

    def test_default_recovery_suggestions(self):
        info = ErrorHandler().handle_error(ProtocolError("short frame"))
        assert any("protocol version" in s for s in info.recovery_suggestions)

    def test_trace_id_included(self):
        handler = ErrorHandler()
        with TraceManager("abcdef0123456789") as trace:
            info = handler.handle_error(ValueError("x"))
        assert info.trace_id == trace.trace_id
        assert "abcdef01" in info.error_id
        assert info.to_dict()["trace_id"] == trace.trace_id

    def test_stats_and_history(self):
        handler = ErrorHandler(max_history=2)
        for _ in range(3):
            handler.handle_error(InvalidConfigError("bad"))
        stats = handler.get_error_stats()
        assert stats["total_errors"] == 2
        assert stats["error_counts"]["configuration:InvalidConfigError"] == 3
        handler.clear_error_history()
        assert handler.get_error_stats()["total_errors"] == 0

    def test_user_friendly_message(self):
        handler = ErrorHandler()
        info = handler.handle_error(InvalidConfigError("bad", user_message="Fix the config"))
        message = handler.create_user_friendly_message(info)
        assert message.startswith("Fix the config")
        assert "Suggested solutions:" in message
        assert info.get_user_friendly_message().endswith(f"(Error ID: {info.error_id})")

    def test_error_context_reraises_and_records(self):
        handler = get_error_handler()
        handler.clear_error_history()
        with pytest.raises(ZeroVectorError):
            with error_context({"operation": "normalize"}):
                raise ZeroVectorError("zero")
        assert handler.error_history[-1].context == {"operation": "normalize"}

    def test_module_level_handler(self):
        info = handle_error(ValueError("bad value"), {"step": 1})
        assert info.context == {"step": 1}
        assert get_error_handler().error_history[-1] is info
