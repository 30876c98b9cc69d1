"""Exception patterns: selective/catch-all handlers, message validation and
redelivery on exception."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .core import Exchange, ExceptionRecord
from .errors import PatternError, RetriesExhausted, ThrownException, ValidationFailed
from .expr import Predicate


@dataclass
class ExceptionHandler:
    selector: str  # exception kind, glob allowed; "*" catches everything
    steps: list = field(default_factory=list)
    mode: str = "resume"  # resume | rethrow

    def matches(self, kind: str) -> bool:
        return self.selector == "*" or fnmatch.fnmatchcase(kind, self.selector)


def select_handler(handlers: Sequence[ExceptionHandler], kind: str) -> ExceptionHandler | None:
    """First handler in declaration order whose selector matches."""
    for handler in handlers:
        if handler.matches(kind):
            return handler
    return None


@dataclass(frozen=True)
class RedeliveryPolicy:
    max_attempts: int = 1
    delays: tuple = ()

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        if any(d < 0 for d in self.delays):
            raise ValueError("delays must be non-negative")
        object.__setattr__(self, "delays", tuple(self.delays))

    def delay(self, failure_index: int) -> int:
        """Ticks to wait after failure ``failure_index`` (0-based); the last delay repeats."""
        if not self.delays:
            return 0
        return self.delays[min(failure_index, len(self.delays) - 1)]

    @classmethod
    def from_dict(cls, raw: Mapping) -> "RedeliveryPolicy":
        return cls(int(raw.get("maxAttempts", 1)), tuple(int(d) for d in raw.get("delays", ())))

    def to_dict(self) -> dict:
        return {"maxAttempts": self.max_attempts, "delays": list(self.delays)}


def record_for(exc: BaseException, step: str, attempt_count: int = 0) -> ExceptionRecord:
    kind = exc.kind if isinstance(exc, PatternError) else type(exc).__name__
    return ExceptionRecord(kind, str(exc), step, attempt_count)


def redeliver_on_exception(step: Callable[[], object], policy: RedeliveryPolicy, clock=None, step_name: str = "step",
                           on_failure: Callable[[ExceptionRecord], None] | None = None):
    """Call ``step`` until it succeeds or ``policy.max_attempts`` tries fail.

    Waits ``policy.delay(i)`` ticks on ``clock`` after failure ``i``.
    Returns ``(result, failures)``; raises RetriesExhausted wrapping the last
    ExceptionRecord, whose ``attempt_count`` is the number of failures.
    """
    failures = 0
    while True:
        try:
            return step(), failures
        except Exception as exc:
            failures += 1
            record = record_for(exc, step_name, failures)
            if on_failure is not None:
                on_failure(record)
            if failures >= policy.max_attempts:
                raise RetriesExhausted(record) from exc
            wait = policy.delay(failures - 1)
            if wait and clock is not None:
                clock.sleep(wait)


def throw_exception(kind: str, message: str = "") -> None:
    raise ThrownException(kind, message)


def _rule_name(rule: Mapping) -> str:
    if "headerRequired" in rule:
        return f"headerRequired:{rule['headerRequired']}"
    if "bodyNonEmpty" in rule:
        return "bodyNonEmpty"
    if "predicate" in rule:
        return rule.get("name") or f"predicate:{rule['predicate']}"
    raise ValueError(f"unknown validation rule {dict(rule)!r}")


def validate_message(exchange: Exchange, rules: Sequence[Mapping]) -> None:
    """Raise ValidationFailed (kind ``validation``) naming the first failing rule."""
    msg = exchange.message
    for rule in rules:
        name = _rule_name(rule)
        if "headerRequired" in rule:
            ok = rule["headerRequired"] in msg.headers
        elif "bodyNonEmpty" in rule:
            ok = len(msg.body) > 0 or not rule["bodyNonEmpty"]
        else:
            ok = Predicate(rule["predicate"]).evaluate(exchange)
        if not ok:
            raise ValidationFailed(name)
