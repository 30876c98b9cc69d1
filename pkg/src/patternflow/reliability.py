"""Endpoint fault tolerance, smart requests and delivery QoS, exercised
against scriptable simulated endpoints.

Time is simulated: endpoint latency is reported in ticks rather than slept,
so a command "times out" when the simulated latency exceeds its budget.
"""

from __future__ import annotations

import heapq
import json
import random
import threading
from collections import Counter, defaultdict, deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .clock import ManualClock
from .core import Channel, IdSource, Message
from .errors import (
    AllEndpointsFailed,
    BufferOverflow,
    CorrelationTimeout,
    DeliveryExhausted,
    EndpointError,
    PartitionSaturated,
    RedeliveryExhausted,
)

OK, ERROR, HANG, LOST = "ok", "error", "timeout-hang", "lost"


# Endpoint simulation


@dataclass(frozen=True)
class BehaviorEntry:
    """Behavior for every request from ``after_request`` (0-based) onwards,
    until the next entry takes over."""

    after_request: int = 0
    outcome: str = OK
    latency: int = 1
    drop_ack: bool = False

    @classmethod
    def from_dict(cls, raw: Mapping) -> "BehaviorEntry":
        outcome = raw.get("outcome", OK)
        if outcome not in (OK, ERROR, HANG):
            raise ValueError(f"unknown endpoint outcome {outcome!r}")
        return cls(int(raw.get("afterRequest", 0)), outcome, int(raw.get("latencyTicks", 1)), bool(raw.get("dropAck", False)))


@dataclass(frozen=True)
class EndpointResponse:
    outcome: str
    latency: int
    response: Message | None = None
    ack: bool = True
    duplicate: bool = False


class EndpointSimulator:
    """Scriptable remote endpoint.

    Per request the simulator decides, in this order and from its own seeded
    RNG: send loss (request never arrives), the scripted outcome for this
    request number, a random error override, random ack loss and random
    network duplication. Counters are exact under concurrent use.
    """

    def __init__(
        self,
        name: str,
        entries: Sequence[BehaviorEntry] = (),
        seed: int | None = 0,
        send_loss: float = 0.0,
        ack_loss: float = 0.0,
        error_rate: float = 0.0,
        duplicate_rate: float = 0.0,
        latency: int = 1,
        handler: Callable[[Message], Message] | None = None,
        reply_body: bytes | None = None,
        ids: IdSource | None = None,
    ):
        self.name = name
        self.entries = sorted(entries, key=lambda e: e.after_request)
        self.send_loss = send_loss
        self.ack_loss = ack_loss
        self.error_rate = error_rate
        self.duplicate_rate = duplicate_rate
        self.latency = latency
        self.handler = handler
        self.reply_body = reply_body
        self.ids = ids or IdSource(random.Random(seed))
        self.gate: threading.Event | None = None
        self.received = 0
        self.succeeded = 0
        self.failed = 0
        self.hung = 0
        self.offered = 0
        self.requests: list[Message] = []
        self._rng = random.Random(seed)
        self._lock = threading.Lock()

    @classmethod
    def from_profile(cls, name: str, raw: Mapping, seed: int | None = 0, **kwargs) -> "EndpointSimulator":
        entries = [BehaviorEntry.from_dict(e) for e in raw.get("entries", ())]
        reply = raw.get("replyBody")
        return cls(
            name,
            entries,
            seed=raw.get("seed", seed),
            send_loss=float(raw.get("sendLoss", 0.0)),
            ack_loss=float(raw.get("ackLoss", 0.0)),
            error_rate=float(raw.get("errorRate", 0.0)),
            duplicate_rate=float(raw.get("duplicateRate", 0.0)),
            latency=int(raw.get("latencyTicks", 1)),
            reply_body=reply.encode("utf-8") if isinstance(reply, str) else None,
            **kwargs,
        )

    def script(self, *outcomes: str, latency: int | None = None) -> "EndpointSimulator":
        """Replace the behavior with one entry per listed outcome, from the next request on."""
        lat = self.latency if latency is None else latency
        start = self.offered
        self.entries = [e for e in self.entries if e.after_request < start]
        self.entries += [BehaviorEntry(start + i, o, lat) for i, o in enumerate(outcomes)]
        return self

    def _entry(self, index: int) -> BehaviorEntry:
        current = BehaviorEntry(0, OK, self.latency)
        for entry in self.entries:
            if entry.after_request <= index:
                current = entry
            else:
                break
        return current

    def reply(self, request: Message) -> Message:
        if self.handler is not None:
            return self.handler(request)
        body = request.body if self.reply_body is None else self.reply_body
        return Message(self.ids.new(), {"status": "ok", "in-reply-to": request.id, "endpoint": self.name}, body)

    def handle(self, request: Message) -> EndpointResponse:
        with self._lock:
            index = self.offered
            self.offered += 1
            if self.send_loss and self._rng.random() < self.send_loss:
                return EndpointResponse(LOST, 0, ack=False)
            self.received += 1
            self.requests.append(request)
            entry = self._entry(index)
            outcome = entry.outcome
            if outcome == OK and self.error_rate and self._rng.random() < self.error_rate:
                outcome = ERROR
            drop_ack = entry.drop_ack or bool(self.ack_loss and self._rng.random() < self.ack_loss)
            duplicate = bool(self.duplicate_rate and self._rng.random() < self.duplicate_rate)
            if duplicate:
                self.received += 1
            gate = self.gate
        if gate is not None:
            gate.wait()
        with self._lock:
            if outcome == OK:
                self.succeeded += 1
            elif outcome == ERROR:
                self.failed += 1
            else:
                self.hung += 1
        if outcome != OK:
            return EndpointResponse(outcome, entry.latency, ack=False)
        return EndpointResponse(OK, entry.latency, self.reply(request), ack=not drop_ack, duplicate=duplicate)

    def counters(self) -> dict[str, int]:
        return {"received": self.received, "succeeded": self.succeeded, "failed": self.failed}

    def __repr__(self) -> str:
        return f"EndpointSimulator({self.name!r}, received={self.received})"


def load_fault_profile(raw: Mapping | str, seed: int | None = None) -> dict[str, EndpointSimulator]:
    """Build simulators from a fault profile document.

    ``{"seed": 42, "endpoints": {"face": {"sendLoss": 0.1, "entries": [...]}}}``;
    an explicit ``seed`` argument overrides the document's. Each endpoint
    derives its own RNG seed from the profile seed and its position.
    """
    if isinstance(raw, str):
        raw = json.loads(raw)
    base = raw.get("seed", 0) if seed is None else seed
    sims = {}
    for i, (name, spec) in enumerate(sorted(raw.get("endpoints", {}).items())):
        spec = dict(spec)
        spec.setdefault("seed", base * 1000 + i)
        sims[name] = EndpointSimulator.from_profile(name, spec)
    return sims


# Circuit breaker


class CircuitBreaker:
    """Count-based rolling-window breaker.

    Opens when the window holds at least ``min_requests`` outcomes and the
    error fraction exceeds ``error_threshold``. After ``open_duration`` ticks
    the next admission is a single half-open trial.
    """

    CLOSED, OPEN, HALF_OPEN = "Closed", "Open", "HalfOpen"

    def __init__(self, window: int = 20, error_threshold: float = 0.5, open_duration: int = 50,
                 min_requests: int | None = None, clock=None):
        if window < 1 or open_duration < 0:
            raise ValueError("window must be positive and open_duration non-negative")
        self.window = window
        self.error_threshold = error_threshold
        self.open_duration = open_duration
        self.min_requests = window if min_requests is None else min_requests
        self.clock = clock or ManualClock()
        self.state = self.CLOSED
        self.opened_at: int | None = None
        self.transitions: list[tuple[int, str]] = []
        self._outcomes: deque[bool] = deque(maxlen=window)
        self._trial_out = False
        self._lock = threading.Lock()

    def _move(self, state: str, now: int) -> None:
        self.state = state
        self.transitions.append((now, state))

    def error_fraction(self) -> float:
        if not self._outcomes:
            return 0.0
        return self._outcomes.count(False) / len(self._outcomes)

    def admit(self, now: int | None = None) -> bool:
        now = self.clock.now() if now is None else now
        with self._lock:
            if self.state == self.CLOSED:
                return True
            if self.state == self.OPEN:
                if now - self.opened_at >= self.open_duration:
                    self._move(self.HALF_OPEN, now)
                    self._trial_out = True
                    return True
                return False
            if self._trial_out:
                return False
            self._trial_out = True
            return True

    def record(self, success: bool, now: int | None = None) -> str:
        now = self.clock.now() if now is None else now
        with self._lock:
            if self.state == self.HALF_OPEN:
                self._trial_out = False
                if success:
                    self._outcomes.clear()
                    self._move(self.CLOSED, now)
                else:
                    self.opened_at = now
                    self._move(self.OPEN, now)
            elif self.state == self.CLOSED:
                self._outcomes.append(bool(success))
                if len(self._outcomes) >= self.min_requests and self.error_fraction() > self.error_threshold:
                    self.opened_at = now
                    self._move(self.OPEN, now)
            return self.state

    def force_open(self, now: int | None = None) -> None:
        with self._lock:
            self.opened_at = self.clock.now() if now is None else now
            self._move(self.OPEN, self.opened_at)

    def reset(self) -> None:
        with self._lock:
            self._outcomes.clear()
            self._trial_out = False
            self._move(self.CLOSED, self.clock.now())


def breaker_record(breaker: CircuitBreaker, outcome: bool | str) -> str:
    return breaker.record(outcome is True or outcome == OK)


def breaker_admit(breaker: CircuitBreaker, now: int | None = None) -> bool:
    return breaker.admit(now)


# Commands


@dataclass(frozen=True)
class CommandResult:
    outcome: str  # ok | failed | timedOut | shortCircuited | fellBack
    latency: int
    response: Message | None = None
    endpoint: str | None = None
    index: int | None = None
    cause: str | None = None  # underlying outcome when fellBack


class ChannelMonitor:
    """Per-endpoint tallies of command outcomes."""

    def __init__(self):
        self._tallies: dict[str, Counter] = defaultdict(Counter)
        self._lock = threading.Lock()

    def record(self, endpoint: str, outcome: str) -> None:
        with self._lock:
            self._tallies[endpoint][outcome] += 1

    def tallies(self, endpoint: str) -> dict[str, int]:
        with self._lock:
            return dict(self._tallies.get(endpoint, {}))

    def report(self, endpoint: str) -> dict[str, int]:
        t = self.tallies(endpoint)
        return {"successes": t.get("ok", 0), "failures": t.get("failed", 0), "timeouts": t.get("timedOut", 0)}

    def endpoints(self) -> list[str]:
        return sorted(self._tallies)


def command_execute(endpoint: EndpointSimulator, request: Message, timeout: int, breaker: CircuitBreaker | None = None,
                    fallback=None, monitor: ChannelMonitor | None = None) -> CommandResult:
    """Run one request inside a command context (timeout, breaker, fallback).

    ``fallback`` is a Message or ``callable(request, result) -> Message``.
    The monitor sees the outcome before any fallback is applied.
    """
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    if breaker is not None and not breaker.admit():
        result = CommandResult("shortCircuited", 0, endpoint=endpoint.name)
    else:
        resp = endpoint.handle(request)
        if resp.outcome in (LOST, HANG) or resp.latency > timeout:
            result = CommandResult("timedOut", timeout, endpoint=endpoint.name)
        elif resp.outcome == ERROR:
            result = CommandResult("failed", resp.latency, endpoint=endpoint.name)
        else:
            result = CommandResult("ok", resp.latency, resp.response, endpoint=endpoint.name)
        if breaker is not None:
            breaker.record(result.outcome == "ok")
    if monitor is not None:
        monitor.record(endpoint.name, result.outcome)
    if fallback is not None and result.outcome != "ok":
        response = fallback(request, result) if callable(fallback) else fallback
        result = CommandResult("fellBack", result.latency, response, endpoint.name, cause=result.outcome)
        if monitor is not None:
            monitor.record(endpoint.name, "fellBack")
    return result


def failover_request(endpoints: Sequence[EndpointSimulator], request: Message, timeout: int,
                     breakers: Mapping[str, CircuitBreaker] | None = None, monitor: ChannelMonitor | None = None,
                     audit=None) -> CommandResult:
    """Try endpoints in order; the result's ``index`` names the one that served."""
    if not endpoints:
        raise ValueError("failover needs at least one endpoint")
    outcomes = []
    for index, endpoint in enumerate(endpoints):
        breaker = (breakers or {}).get(endpoint.name)
        result = command_execute(endpoint, request, timeout, breaker=breaker, monitor=monitor)
        if audit is not None:
            audit.append("failover-attempt", endpoint.name, f"{request.id}:{result.outcome}")
        if result.outcome == "ok":
            return CommandResult("ok", result.latency, result.response, endpoint.name, index)
        outcomes.append(f"{endpoint.name}:{result.outcome}")
    raise AllEndpointsFailed(outcomes)


class _Batch:
    def __init__(self):
        self.done = threading.Event()
        self.result: CommandResult | None = None
        self.callers = 0


class RequestCollapser:
    """Requests sharing a key within one aligned clock window share a single
    endpoint call. Windows are ``[k*window, (k+1)*window)``."""

    def __init__(self, endpoint: EndpointSimulator, window: int, key_fn: Callable[[Message], str], clock=None,
                 timeout: int = 10, breaker: CircuitBreaker | None = None, monitor: ChannelMonitor | None = None):
        if window < 1:
            raise ValueError("window must be at least one tick")
        self.endpoint = endpoint
        self.window = window
        self.key_fn = key_fn
        self.clock = clock or ManualClock()
        self.timeout = timeout
        self.breaker = breaker
        self.monitor = monitor
        self.calls = 0
        self._batches: dict[tuple[str, int], _Batch] = {}
        self._lock = threading.Lock()

    def submit(self, request: Message) -> CommandResult:
        slot = self.clock.now() // self.window
        key = (self.key_fn(request), slot)
        with self._lock:
            for stale in [k for k in self._batches if k[1] < slot]:
                del self._batches[stale]
            batch = self._batches.get(key)
            leader = batch is None
            if leader:
                batch = self._batches[key] = _Batch()
                self.calls += 1
            batch.callers += 1
        if leader:
            try:
                batch.result = command_execute(self.endpoint, request, self.timeout, self.breaker, monitor=self.monitor)
            finally:
                batch.done.set()
        else:
            batch.done.wait()
        return batch.result


def collapse_requests(collapser: RequestCollapser, requests: Iterable[Message]) -> list[CommandResult]:
    """Submit requests concurrently through ``collapser``; results keep input order."""
    requests = list(requests)
    results: list[CommandResult | None] = [None] * len(requests)

    def run(i: int) -> None:
        results[i] = collapser.submit(requests[i])

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(requests))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    return results


class RequestCache:
    """Successful responses cached per key for ``ttl`` ticks; failures are not cached."""

    def __init__(self, endpoint: EndpointSimulator, ttl: int, key_fn: Callable[[Message], str], clock=None,
                 timeout: int = 10, monitor: ChannelMonitor | None = None):
        self.endpoint = endpoint
        self.ttl = ttl
        self.key_fn = key_fn
        self.clock = clock or ManualClock()
        self.timeout = timeout
        self.monitor = monitor
        self.hits = 0
        self.misses = 0
        self._entries: dict[str, tuple[int, Message]] = {}
        self._lock = threading.Lock()

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def request(self, request: Message) -> CommandResult:
        key = self.key_fn(request)
        now = self.clock.now()
        with self._lock:
            cached = self._entries.get(key)
            if cached is not None and now <= cached[0] + self.ttl:
                self.hits += 1
                return CommandResult("ok", 0, cached[1].with_header("cache.hit", "true"), self.endpoint.name)
            self.misses += 1
        result = command_execute(self.endpoint, request, self.timeout, monitor=self.monitor)
        if result.outcome != "ok":
            return result
        with self._lock:
            self._entries[key] = (now, result.response)
        return CommandResult("ok", result.latency, result.response.with_header("cache.hit", "false"), self.endpoint.name)


def cached_request(cache: RequestCache, request: Message) -> CommandResult:
    return cache.request(request)


class Bulkhead:
    """Named partitions with independent in-flight limits. Excess requests are
    rejected immediately, never queued."""

    def __init__(self, partitions: Mapping[str, int]):
        if any(limit < 1 for limit in partitions.values()):
            raise ValueError("partition limits must be positive")
        self.limits = dict(partitions)
        self._in_flight = {name: 0 for name in partitions}
        self.rejected = Counter()
        self._lock = threading.Lock()

    def in_flight(self, partition: str) -> int:
        return self._in_flight[partition]

    @contextmanager
    def slot(self, partition: str):
        with self._lock:
            if partition not in self.limits:
                raise KeyError(f"unknown partition {partition!r}")
            if self._in_flight[partition] >= self.limits[partition]:
                self.rejected[partition] += 1
                raise PartitionSaturated(f"partition {partition!r} at its limit of {self.limits[partition]}")
            self._in_flight[partition] += 1
        try:
            yield
        finally:
            with self._lock:
                self._in_flight[partition] -= 1

    def execute(self, partition: str, endpoint: EndpointSimulator, request: Message, timeout: int = 10,
                **command_kwargs) -> CommandResult:
        with self.slot(partition):
            return command_execute(endpoint, request, timeout, **command_kwargs)


def partitioned_request(bulkhead: Bulkhead, partition: str, endpoint: EndpointSimulator, request: Message,
                        timeout: int = 10) -> CommandResult:
    return bulkhead.execute(partition, endpoint, request, timeout)


# Receivers


class CommutativeReceiver:
    """Resequencer: buffers out-of-order arrivals and releases maximal runs
    of consecutive sequence numbers starting at ``start``.

    ``gap_capacity`` bounds how far ahead of the next expected number an
    arrival may be. Arrivals already released or already buffered are
    ignored.
    """

    def __init__(self, gap_capacity: int = 1024, start: int = 1):
        self.gap_capacity = gap_capacity
        self.next_seq = start
        self._pending: dict[int, object] = {}
        self._lock = threading.Lock()

    @property
    def buffered(self) -> int:
        return len(self._pending)

    def offer(self, seq: int, item=None) -> list:
        with self._lock:
            if seq < self.next_seq or seq in self._pending:
                return []
            if seq - self.next_seq > self.gap_capacity:
                raise BufferOverflow(f"sequence {seq} is {seq - self.next_seq} ahead of {self.next_seq}")
            self._pending[seq] = seq if item is None else item
            released = []
            while self.next_seq in self._pending:
                released.append(self._pending.pop(self.next_seq))
                self.next_seq += 1
            return released


def commutative_receive(buffer: CommutativeReceiver, message: Message, sequence_header: str = "seq") -> list[Message]:
    return buffer.offer(int(message.headers[sequence_header]), message)


class IdempotentReceiver:
    """Processes each message id once, remembering ids in a store for ``ttl`` ticks."""

    def __init__(self, store, consumer: Callable[[Message], object] | None = None, ttl: int | None = 10_000):
        self.store = store
        self.consumer = consumer
        self.ttl = ttl
        self.processed = Counter()
        self._lock = threading.Lock()

    def receive(self, message: Message) -> bool:
        with self._lock:
            if self.store.contains(message.id):
                return False
            if self.consumer is not None:
                self.consumer(message)
            self.store.put(message.id, b"1", ttl=self.ttl)
            self.processed[message.id] += 1
            return True


def timed_redeliver(send: Callable[[Message], object], message: Message, schedule: Sequence[int], ack_channel: Channel,
                    clock=None) -> int:
    """Send identical copies at the ``schedule`` offsets (ticks after start)
    until an ack naming ``message.id`` shows up on ``ack_channel``.

    An ack is a message whose ``ack-for`` header, or else body, is the id.
    Returns the number of attempts made.
    """
    if not schedule:
        raise ValueError("schedule must not be empty")
    clock = clock or ManualClock()
    start = clock.now()

    def acked() -> bool:
        found = False
        for ack in ack_channel.drain():
            ref = ack.headers.get("ack-for") or ack.body.decode("utf-8", "replace")
            found = found or ref == message.id
        return found

    attempts = 0
    for offset in sorted(schedule):
        wait = start + offset - clock.now()
        if wait > 0:
            clock.sleep(wait)
        if attempts and acked():
            return attempts
        send(message)
        attempts += 1
        if acked():
            return attempts
    raise RedeliveryExhausted(attempts)


# Quality of service

LEVELS = ("bestEffort", "atLeastOnce", "atMostOnce", "exactlyOnce", "exactlyOnceInOrder")
_RETRYING = ("atLeastOnce", "exactlyOnce", "exactlyOnceInOrder")


@dataclass
class QosConfig:
    level: str
    max_redeliveries: int = 10
    dedup_store: object = None
    sequence_header: str | None = None
    retry_delay: int = 5
    dedup_ttl: int | None = 10_000
    gap_capacity: int = 1024

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValueError(f"unknown QoS level {self.level!r}")
        if self.level.startswith("exactlyOnce") and self.dedup_store is None:
            raise ValueError(f"{self.level} needs a dedup store")
        if self.level == "exactlyOnceInOrder" and not self.sequence_header:
            raise ValueError("exactlyOnceInOrder needs a sequence header")


@dataclass
class DeliveryReport:
    delivered: int = 0
    duplicates_processed: int = 0
    lost: int = 0
    order_violations: int = 0
    per_endpoint: dict = field(default_factory=dict)
    exhausted: list = field(default_factory=list)
    attempts: int = 0

    def to_dict(self) -> dict:
        return {
            "delivered": self.delivered,
            "duplicatesProcessed": self.duplicates_processed,
            "lost": self.lost,
            "orderViolations": self.order_violations,
            "perEndpoint": self.per_endpoint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def deliver_with_qos(cfg: QosConfig, messages: Sequence[Message], endpoint: EndpointSimulator,
                     consumer: Callable[[Message], object] | None = None, clock=None,
                     raise_on_exhausted: bool = True) -> DeliveryReport:
    """Simulate sending ``messages`` to ``endpoint`` under ``cfg``.

    Message ``i`` is first sent at tick ``i``; it arrives after the
    endpoint's latency. Retrying levels resend every ``retry_delay`` ticks
    until acked, which is what lets redeliveries overtake later messages.
    Counts are taken at the consumer. ``consumer`` raising counts as a
    processing failure (no ack).
    """
    clock = clock or ManualClock()
    t0 = clock.now()
    index_of = {m.id: i for i, m in enumerate(messages)}
    if len(index_of) != len(messages):
        raise ValueError("message ids must be distinct")
    if cfg.level == "exactlyOnceInOrder":
        messages = [m.with_header(cfg.sequence_header, str(i + 1)) for i, m in enumerate(messages)]
    retrying = cfg.level in _RETRYING
    resequencer = CommutativeReceiver(cfg.gap_capacity) if cfg.level == "exactlyOnceInOrder" else None
    processed: Counter = Counter()
    seen: set[str] = set()
    acked: set[str] = set()
    attempts: Counter = Counter()
    exhausted: list[str] = []
    report = DeliveryReport()
    max_index = -1

    def process(message: Message) -> bool:
        nonlocal max_index
        if consumer is not None:
            try:
                consumer(message)
            except Exception:
                return False
        i = index_of[message.id]
        if processed[message.id] == 0:
            if i < max_index:
                report.order_violations += 1
            max_index = max(max_index, i)
        processed[message.id] += 1
        return True

    def receive(message: Message) -> bool:
        """Receiver side for one arrival; returns whether to ack."""
        if cfg.level == "atMostOnce":
            if message.id in seen:
                return False
            seen.add(message.id)
            return process(message)
        if cfg.level in ("bestEffort", "atLeastOnce"):
            return process(message)
        store = cfg.dedup_store
        if store.contains(message.id):
            return True
        if resequencer is None:
            if not process(message):
                return False
            store.put(message.id, b"1", ttl=cfg.dedup_ttl)
            return True
        try:
            released = resequencer.offer(int(message.headers[cfg.sequence_header]), message)
        except BufferOverflow:
            return False
        store.put(message.id, b"1", ttl=cfg.dedup_ttl)
        for ready in released:
            process(ready)
        return True

    events: list = []
    order = 0

    def schedule(at: int, kind: str, payload) -> None:
        nonlocal order
        heapq.heappush(events, (at, order, kind, payload))
        order += 1

    for i, m in enumerate(messages):
        schedule(t0 + i, "send", m)
    while events:
        at, _, kind, payload = heapq.heappop(events)
        if isinstance(clock, ManualClock) and at > clock.now():
            clock.advance_to(at)
        if kind == "send":
            message = payload
            attempts[message.id] += 1
            report.attempts += 1
            resp = endpoint.handle(message)
            if resp.outcome != LOST:
                schedule(at + max(0, resp.latency), "arrive", (message, resp))
            if retrying:
                schedule(at + cfg.retry_delay, "timer", message)
        elif kind == "arrive":
            message, resp = payload
            if resp.outcome != OK:
                continue
            ack = receive(message)
            if resp.duplicate:
                ack = receive(message) or ack
            if ack and resp.ack:
                acked.add(message.id)
        else:
            message = payload
            if message.id in acked:
                continue
            if attempts[message.id] <= cfg.max_redeliveries:
                schedule(at, "send", message)
            else:
                exhausted.append(message.id)

    report.delivered = sum(1 for c in processed.values() if c > 0)
    report.duplicates_processed = sum(processed.values()) - report.delivered
    report.lost = len(messages) - report.delivered
    report.per_endpoint = {endpoint.name: endpoint.counters()}
    report.exhausted = exhausted
    if exhausted and raise_on_exhausted:
        raise DeliveryExhausted(report, exhausted)
    return report


# Bridges


class SyncToAsyncBridge:
    """Synchronous callers get an immediate receipt; a queue feeds the endpoint later."""

    def __init__(self, endpoint: EndpointSimulator, channel: Channel | None = None, timeout: int = 10,
                 monitor: ChannelMonitor | None = None):
        self.endpoint = endpoint
        self.channel = channel or Channel(f"bridge:{endpoint.name}", capacity=1000)
        self.timeout = timeout
        self.monitor = monitor

    def call(self, request: Message) -> CommandResult:
        self.channel.send(request)
        receipt = request.with_header("bridge.receipt", request.id)
        return CommandResult("ok", 0, receipt, self.endpoint.name)

    def pump(self) -> list[CommandResult]:
        results = []
        while (message := self.channel.receive()) is not None:
            results.append(command_execute(self.endpoint, message, self.timeout, monitor=self.monitor))
        return results


class AsyncToSyncBridge:
    """A queued message triggers a synchronous call; the reply carries the
    request's correlation id and goes to ``reply_channel``."""

    def __init__(self, endpoint: EndpointSimulator, correlation_header: str, reply_timeout: int,
                 reply_channel: Channel | None = None, monitor: ChannelMonitor | None = None):
        if not correlation_header or reply_timeout <= 0:
            raise ValueError("asyncToSync needs a correlation header and a positive reply timeout")
        self.endpoint = endpoint
        self.correlation_header = correlation_header
        self.reply_timeout = reply_timeout
        self.reply_channel = reply_channel or Channel(f"replies:{endpoint.name}", capacity=1000)
        self.monitor = monitor

    def bind(self, channel: Channel) -> None:
        channel.set_consumer(self.on_message)

    def on_message(self, message: Message) -> Message:
        correlation = message.headers.get(self.correlation_header, message.id)
        result = command_execute(self.endpoint, message, self.reply_timeout, monitor=self.monitor)
        if result.outcome == "timedOut":
            raise CorrelationTimeout(f"no reply for {correlation} within {self.reply_timeout} ticks")
        if result.outcome != "ok":
            raise EndpointError(f"request {correlation} failed at {self.endpoint.name!r}")
        reply = result.response.with_header(self.correlation_header, correlation)
        self.reply_channel.send(reply)
        return reply


def bridge(mode: str, endpoint: EndpointSimulator, **config):
    if mode == "syncToAsync":
        return SyncToAsyncBridge(endpoint, **config)
    if mode == "asyncToSync":
        return AsyncToSyncBridge(endpoint, **config)
    raise ValueError(f"unknown bridge mode {mode!r}")
