"""patternflow: a message-integration runtime of composable pattern components."""

from __future__ import annotations

from pathlib import Path

from .clock import ManualClock, SystemClock
from .core import Channel, Exchange, ExceptionRecord, HistoryEntry, IdSource, Message, Processor, create_message, send
from .errors import FlowError, ParseError, PatternError, ValidationError
from .flow import FlowDocument, Step, Branch, instantiate_template, parse_flow, render_flow
from .handling import ExceptionHandler, RedeliveryPolicy, redeliver_on_exception, validate_message
from .runtime import Runtime

FIXTURES = Path(__file__).parent / "fixtures"


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture file (e.g. ``edocument.json``)."""
    path = FIXTURES / name
    if not path.exists():
        raise FileNotFoundError(name)
    return path


__version__ = "0.1.0"

__all__ = [
    "Branch", "Channel", "ExceptionHandler", "ExceptionRecord", "Exchange", "FIXTURES", "FlowDocument", "FlowError",
    "HistoryEntry", "IdSource", "ManualClock", "Message", "ParseError", "PatternError", "Processor",
    "RedeliveryPolicy", "Runtime", "Step", "SystemClock", "ValidationError", "create_message", "fixture_path",
    "instantiate_template", "parse_flow", "redeliver_on_exception", "render_flow", "send", "validate_message",
]
