"""
Unit tests for structured logging.
"""

import json
import logging

import pytest

from src.structured_logger import (
    ROOT_LOGGER_NAME,
    JSONFormatter,
    LogContext,
    SimpleFormatter,
    TraceManager,
    generate_trace_id,
    get_logger,
    get_trace_id,
    setup_cli_logging,
    setup_logging,
)


def make_record(message="threshold moved", **extra):
    record = logging.LogRecord("edgefm.netadapt", logging.INFO, __file__, 10, message, None, None)
    for key, value in extra.items():
        setattr(record, key, value)
    return record


@pytest.fixture
def restore_logging():
    yield
    setup_cli_logging(0)


@pytest.mark.unit
class TestFormatters:
    def test_json_fields(self):
        data = json.loads(JSONFormatter().format(make_record(bandwidth_mbps=55.0)))
        assert data["level"] == "INFO"
        assert data["logger"] == "edgefm.netadapt"
        assert data["message"] == "threshold moved"
        assert data["extra"] == {"bandwidth_mbps": 55.0}
        assert "trace_id" not in data

    def test_json_trace_and_context(self):
        record = make_record(context=LogContext(component="edge", operation="probe").to_dict())
        with TraceManager("trace-1"):
            data = json.loads(JSONFormatter().format(record))
        assert data["trace_id"] == "trace-1"
        assert data["context"] == {"component": "edge", "operation": "probe", "metadata": {}}

    def test_simple_format(self):
        with TraceManager("0123456789abcdef"):
            line = SimpleFormatter().format(make_record())
        assert line.startswith("[01234567] ")
        assert line.endswith("INFO - edgefm.netadapt - threshold moved")


@pytest.mark.unit
class TestLoggers:
    """Test logger naming, levels and handlers."""

    def test_names_nest_under_root(self):
        assert get_logger("customizer").name == "edgefm.customizer"
        assert get_logger("edgefm.nodes").name == "edgefm.nodes"
        assert get_logger().name == ROOT_LOGGER_NAME

    @pytest.mark.parametrize("verbose,level", [(0, logging.WARNING), (1, logging.INFO), (2, logging.DEBUG)])
    def test_cli_verbosity(self, restore_logging, verbose, level):
        setup_cli_logging(verbose)
        root = logging.getLogger(ROOT_LOGGER_NAME)
        assert root.level == level
        assert len(root.handlers) == 1

    def test_file_logging(self, temp_dir, restore_logging):
        setup_logging({"level": "DEBUG", "enable_file_logging": True, "log_directory": str(temp_dir)})
        get_logger("edgefm.test").warning("disk is slow", context=LogContext(component="test"))
        for handler in logging.getLogger(ROOT_LOGGER_NAME).handlers:
            handler.flush()
        line = (temp_dir / "edgefm.log").read_text().strip().splitlines()[-1]
        assert json.loads(line)["message"] == "disk is slow"
        assert (temp_dir / "error.log").read_text().strip()

    def test_trace_manager_scope(self):
        assert get_trace_id() is None
        with TraceManager() as trace:
            assert get_trace_id() == trace.trace_id
        assert get_trace_id() is None

    def test_generated_trace_ids_are_unique(self):
        ids = {generate_trace_id() for _ in range(50)}
        assert len(ids) == 50
        assert all(len(i) == 36 for i in ids)
        assert TraceManager().trace_id != TraceManager().trace_id
