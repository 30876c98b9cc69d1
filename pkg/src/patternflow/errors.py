"""Exception hierarchy.

Every error raised by a pattern carries a ``kind`` string. Flow exception
handlers select on that kind (``"*"`` catches everything), so the kind is
part of the public contract, the class name is not.
"""

from __future__ import annotations

from typing import Any


class PatternError(Exception):
    kind = "error"

    def __init__(self, message: str = "", **details: Any):
        super().__init__(message or self.__class__.__name__)
        self.details = details


# core runtime

class ChannelFull(PatternError):
    kind = "channel-full"


class NoConsumer(PatternError):
    kind = "no-consumer"


class DuplicateProcessor(PatternError):
    kind = "duplicate-processor"


class UnknownProcessor(PatternError):
    kind = "unknown-processor"


class FlowError(PatternError):
    """An exception escaped every handler of a flow."""

    kind = "flow-error"

    def __init__(self, record, exchange=None):
        super().__init__(f"{record.kind} at {record.raising_step}: {record.message}")
        self.record = record
        self.exchange = exchange


class FlowStopped(PatternError):
    kind = "flow-stopped"


class UnknownFlow(PatternError):
    kind = "unknown-flow"


class UnknownStep(PatternError):
    kind = "unknown-step"


class ExpressionError(PatternError):
    kind = "expression"

    def __init__(self, message: str, position: int = -1):
        super().__init__(f"{message} (at {position})")
        self.position = position


# routing

class FormatMismatch(PatternError):
    kind = "format-mismatch"


class LoopLimitExceeded(PatternError):
    kind = "loop-limit"


class MulticastFailed(PatternError):
    kind = "multicast-failed"


# transform

class ParseError(PatternError):
    kind = "parse"

    def __init__(self, message: str, position: int = -1):
        super().__init__(f"{message} at offset {position}")
        self.position = position


class UnsupportedContent(ParseError):
    """Document is well formed but outside the convertible subset."""

    kind = "unsupported-content"


class PathNotFound(PatternError):
    kind = "path-not-found"


class MalformedEncoding(PatternError):
    kind = "malformed-encoding"


class CorruptStream(PatternError):
    kind = "corrupt-stream"


class InvalidUtf8(PatternError):
    kind = "invalid-utf8"


class NonNumericSegment(PatternError):
    kind = "non-numeric-segment"


# stores

class KeyNotFound(PatternError, KeyError):
    kind = "key-not-found"

    def __str__(self) -> str:
        return Exception.__str__(self)


class Expired(KeyNotFound):
    kind = "expired"


class ScopeViolation(PatternError):
    kind = "scope-violation"


class UnknownVariable(PatternError):
    kind = "unknown-variable"


class UnknownAlias(PatternError):
    kind = "unknown-alias"


class ExpiredCredential(PatternError):
    kind = "expired-credential"


class QuorumUnavailable(PatternError):
    kind = "quorum-unavailable"


# security

class NotEncrypted(PatternError):
    kind = "not-encrypted"


class DecryptFailure(PatternError):
    kind = "decrypt-failure"


class VerificationFailed(PatternError):
    kind = "verification-failed"


class MissingSignature(PatternError):
    kind = "missing-signature"


class AuthenticationFailed(PatternError):
    kind = "authentication-failed"


class IntegrityViolation(PatternError):
    kind = "integrity-violation"


class TokenExpired(PatternError):
    kind = "token-expired"


class TokenUnknown(PatternError):
    kind = "token-unknown"


class NotRefreshable(PatternError):
    kind = "not-refreshable"


class AuthorizationDenied(PatternError):
    kind = "authorization-denied"

    def __init__(self, missing):
        self.missing = frozenset(missing)
        super().__init__("missing roles: " + ",".join(sorted(self.missing)))


class NoPrincipal(PatternError):
    kind = "no-principal"


class ChainBroken(PatternError):
    kind = "chain-broken"

    def __init__(self, seq: int):
        super().__init__(f"audit chain broken at seq {seq}")
        self.seq = seq


# reliability

class EndpointError(PatternError):
    kind = "endpoint"


class CommandTimeout(PatternError):
    kind = "timeout"


class CircuitOpen(PatternError):
    kind = "circuit-open"


class AllEndpointsFailed(PatternError):
    kind = "all-endpoints-failed"

    def __init__(self, outcomes):
        self.outcomes = list(outcomes)
        super().__init__("all endpoints failed: " + ", ".join(self.outcomes))


class PartitionSaturated(PatternError):
    kind = "partition-saturated"


class DeliveryExhausted(PatternError):
    kind = "delivery-exhausted"

    def __init__(self, report, message_ids):
        self.report = report
        self.message_ids = list(message_ids)
        super().__init__(f"{len(self.message_ids)} message(s) exhausted redeliveries")


class BufferOverflow(PatternError):
    kind = "buffer-overflow"


class RedeliveryExhausted(PatternError):
    kind = "redelivery-exhausted"

    def __init__(self, attempts: int):
        super().__init__(f"no ack after {attempts} attempts")
        self.attempts = attempts


class CorrelationTimeout(PatternError):
    kind = "correlation-timeout"


# exception handling

class ThrownException(PatternError):
    """Raised by an explicit ``throw`` step; its kind is configured."""

    def __init__(self, kind: str, message: str = ""):
        super().__init__(message or kind)
        self.kind = kind


class ValidationFailed(PatternError):
    kind = "validation"

    def __init__(self, rule: str):
        super().__init__(f"validation rule failed: {rule}", rule=rule)
        self.rule = rule


class RetriesExhausted(PatternError):
    kind = "retries-exhausted"

    def __init__(self, last):
        super().__init__(f"gave up after {last.attempt_count} failures: {last.message}")
        self.last = last


# monitoring

class UnknownComponent(PatternError):
    kind = "unknown-component"


class UnknownMessage(PatternError):
    kind = "unknown-message"


class NotHolder(PatternError):
    kind = "not-holder"


# composition

class ValidationError(PatternError):
    kind = "flow-validation"

    def __init__(self, rule: str, location: str, message: str = ""):
        super().__init__(f"{rule} at {location}" + (f": {message}" if message else ""))
        self.rule = rule
        self.location = location


class MissingBinding(PatternError):
    kind = "missing-binding"

    def __init__(self, name: str):
        super().__init__(f"no binding for parameter {name!r}")
        self.name = name


class UnknownSubprocess(PatternError):
    kind = "unknown-subprocess"
