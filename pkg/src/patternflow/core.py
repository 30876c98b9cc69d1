"""Message, exchange and channel model."""

from __future__ import annotations

import inspect
import itertools
import random
import threading
from collections import deque
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Callable, Mapping

from .errors import ChannelFull, NoConsumer, UnknownVariable


def _frozen_map(values) -> Mapping:
    return MappingProxyType(dict(values or {}))


@dataclass(frozen=True, eq=True)
class Message:
    """Immutable unit of transfer.

    Transformations return new values via the ``with_*`` helpers and keep the
    id, so an id names one logical message across a flow (and across
    redeliveries). Use ``IdSource.new`` for message-creating patterns.
    """

    id: str
    headers: Mapping[str, str] = field(default_factory=dict)
    body: bytes = b""
    attachments: Mapping[str, bytes] = field(default_factory=dict)

    __hash__ = None  # type: ignore[assignment]

    def __post_init__(self):
        if not self.id:
            raise ValueError("message id must be non-empty")
        object.__setattr__(self, "headers", _frozen_map(self.headers))
        object.__setattr__(self, "attachments", _frozen_map(self.attachments))
        if not isinstance(self.body, bytes):
            object.__setattr__(self, "body", bytes(self.body))

    def header(self, name: str, default: str | None = None) -> str | None:
        return self.headers.get(name, default)

    def with_body(self, body: bytes, **headers: str) -> "Message":
        msg = replace(self, body=body)
        return msg.with_headers(headers) if headers else msg

    def with_headers(self, headers: Mapping[str, str]) -> "Message":
        merged = dict(self.headers)
        merged.update(headers)
        return replace(self, headers=merged)

    def with_header(self, name: str, value: str) -> "Message":
        return self.with_headers({name: value})

    def without_headers(self, *names: str) -> "Message":
        return replace(self, headers={k: v for k, v in self.headers.items() if k not in names})

    def with_attachments(self, attachments: Mapping[str, bytes]) -> "Message":
        return replace(self, attachments=attachments)

    def __repr__(self) -> str:
        body = self.body if len(self.body) <= 40 else self.body[:37] + b"..."
        return f"Message(id={self.id!r}, headers={dict(self.headers)!r}, body={body!r})"


class IdSource:
    """Message ids of the form ``<counter>-<64-bit hex>``."""

    def __init__(self, rng: random.Random | None = None):
        self._rng = rng or random.Random()
        self._counter = itertools.count(1)
        self._lock = threading.Lock()

    def new(self) -> str:
        with self._lock:
            return f"{next(self._counter)}-{self._rng.getrandbits(64):016x}"


_default_ids = IdSource()


def create_message(
    body: bytes = b"",
    headers: Mapping[str, str] | None = None,
    attachments: Mapping[str, bytes] | None = None,
    ids: IdSource | None = None,
) -> Message:
    return Message(
        id=(ids or _default_ids).new(),
        headers=dict(headers or {}),
        body=bytes(body),
        attachments=dict(attachments or {}),
    )


@dataclass(frozen=True)
class ExceptionRecord:
    kind: str
    message: str
    raising_step: str
    attempt_count: int = 0

    def retried(self) -> "ExceptionRecord":
        return replace(self, attempt_count=self.attempt_count + 1)


@dataclass(frozen=True)
class HistoryEntry:
    step: str
    timestamp: int
    outcome: str  # ok | failed | skipped | cancelled


class TransientStore:
    """Flow-instance variables; dropped with the exchange, never persisted."""

    def __init__(self, scope: str):
        self.scope = scope
        self._vars: dict[str, str] = {}

    def set(self, name: str, value: str) -> None:
        self._vars[name] = value

    def get(self, name: str) -> str:
        try:
            return self._vars[name]
        except KeyError:
            raise UnknownVariable(f"{name!r} not set in instance {self.scope}") from None

    def as_dict(self) -> dict[str, str]:
        return dict(self._vars)

    def copy(self, scope: str | None = None) -> "TransientStore":
        clone = TransientStore(scope or self.scope)
        clone._vars = dict(self._vars)
        return clone


class Exchange:
    """Per-message processing context confined to one flow instance."""

    def __init__(self, message: Message, flow: str = "", instance: str = ""):
        self.message = message
        self.flow = flow
        self.instance = instance or message.id
        self.properties: dict[str, str] = {}
        self.exception: ExceptionRecord | None = None
        self.variables = TransientStore(self.instance)
        self.branches: list[Exchange] = []
        self.cancelled = False
        self._history: list[HistoryEntry] = []

    @property
    def history(self) -> tuple[HistoryEntry, ...]:
        return tuple(self._history)

    def record(self, step: str, timestamp: int, outcome: str) -> None:
        if self._history and timestamp < self._history[-1].timestamp:
            raise ValueError("history must be time-ordered")
        self._history.append(HistoryEntry(step, timestamp, outcome))

    def fork(self, instance: str | None = None) -> "Exchange":
        """Independent copy for a branch. The message value is shared (it is immutable)."""
        clone = Exchange(self.message, self.flow, instance or self.instance)
        clone.properties = dict(self.properties)
        clone.variables = self.variables.copy(clone.instance)
        return clone

    def __repr__(self) -> str:
        return f"Exchange(flow={self.flow!r}, message={self.message!r}, steps={len(self._history)})"


class Channel:
    """Named conduit: ``direct`` hands each message to one consumer
    synchronously, ``queue`` buffers up to ``capacity`` messages in FIFO order.
    """

    def __init__(self, name: str, capacity: int = 100, mode: str = "queue", format: str | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        if mode not in ("direct", "queue"):
            raise ValueError(f"unknown channel mode {mode!r}")
        self.name = name
        self.capacity = capacity
        self.mode = mode
        self.format = format
        self.enqueued_total = 0
        self._queue: deque[Message] = deque()
        self._consumer: Callable[[Message], object] | None = None
        self._interceptors: list[Callable[[Message], None]] = []
        self._lock = threading.Lock()
        self.on_listener_error: Callable[[BaseException], None] | None = None

    @property
    def message_count(self) -> int:
        return len(self._queue)

    def set_consumer(self, consumer: Callable[[Message], object] | None) -> None:
        """Register the consumer. On a queue channel a consumer turns the
        channel into a pass-through (used by the join router)."""
        self._consumer = consumer

    def add_interceptor(self, listener: Callable[[Message], None]) -> Callable[[], None]:
        self._interceptors.append(listener)
        return lambda: self._interceptors.remove(listener)

    def _notify(self, message: Message) -> None:
        for listener in list(self._interceptors):
            try:
                listener(message)
            except Exception as exc:  # listeners never affect traffic
                if self.on_listener_error:
                    self.on_listener_error(exc)

    def send(self, message: Message) -> bool:
        if self.mode == "direct":
            if self._consumer is None:
                raise NoConsumer(f"direct channel {self.name!r} has no consumer")
            self._notify(message)
            with self._lock:
                self.enqueued_total += 1
            self._consumer(message)
            return True
        with self._lock:
            if self._consumer is None and len(self._queue) >= self.capacity:
                raise ChannelFull(f"channel {self.name!r} at capacity {self.capacity}")
            self.enqueued_total += 1
            if self._consumer is None:
                self._queue.append(message)
        self._notify(message)
        if self._consumer is not None:
            self._consumer(message)
        return True

    def receive(self) -> Message | None:
        with self._lock:
            return self._queue.popleft() if self._queue else None

    def drain(self) -> list[Message]:
        with self._lock:
            items = list(self._queue)
            self._queue.clear()
        return items

    def peek_all(self) -> list[Message]:
        with self._lock:
            return list(self._queue)

    def replace_pending(self, index: int, message: Message) -> None:
        """Test hook: overwrite a buffered message in place."""
        with self._lock:
            self._queue[index] = message

    def __repr__(self) -> str:
        return f"Channel({self.name!r}, mode={self.mode}, pending={len(self._queue)})"


def send(channel: Channel, message: Message) -> bool:
    return channel.send(message)


@dataclass
class Processor:
    """A registered custom step implementation."""

    name: str
    fn: Callable
    kind: str = "custom"
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        try:
            params = inspect.signature(self.fn).parameters.values()
        except (TypeError, ValueError):
            self._arity = 3
            return
        if any(p.kind is p.VAR_POSITIONAL for p in params):
            self._arity = 3
        else:
            positional = [p for p in params if p.kind in (p.POSITIONAL_ONLY, p.POSITIONAL_OR_KEYWORD)]
            self._arity = min(3, len(positional))

    def __call__(self, message: Message, exchange: Exchange | None = None, config=None) -> Message:
        args = (message, exchange, config or {})[: max(1, self._arity)]
        return self.fn(*args)
