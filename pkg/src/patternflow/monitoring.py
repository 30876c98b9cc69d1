"""Monitoring and operations: usage statistics, indicators, inactivity
detection, message history, sanity queues, a persistent scheduler and a
lease-based cluster lock.

Everything that must survive a restart is written through a DataStore.
"""

from __future__ import annotations

import json
import threading
from collections import Counter, OrderedDict, deque
from dataclasses import asdict, dataclass
from typing import Callable, Iterable

from .clock import ManualClock
from .errors import NotHolder, UnknownComponent, UnknownMessage
from .stores import DataStore

OUTCOMES = ("success", "failure", "cancellation")


def _memory_store(name: str, clock) -> DataStore:
    return DataStore(name, None, clock)


@dataclass
class StatRecord:
    component: str
    invocations: int = 0
    successes: int = 0
    failures: int = 0
    cancellations: int = 0
    latency_min: int | None = None
    latency_max: int | None = None
    latency_sum: int = 0


def _counter(outcome: str) -> str:
    return {"success": "successes", "failure": "failures", "cancellation": "cancellations"}[outcome]


class UsageStatistics:
    """Per-component counters, persisted after every update."""

    def __init__(self, store: DataStore | None = None):
        self.store = store if store is not None else _memory_store("stats", None)
        self._records: dict[str, StatRecord] = {}
        self._lock = threading.Lock()
        for key in self.store.query():
            self._records[key] = StatRecord(**json.loads(self.store.get(key)))

    def record(self, component: str, outcome: str, latency: int = 0) -> StatRecord:
        with self._lock:
            rec = self._records.setdefault(component, StatRecord(component))
            rec.invocations += 1
            attr = _counter(outcome)
            setattr(rec, attr, getattr(rec, attr) + 1)
            rec.latency_sum += latency
            rec.latency_min = latency if rec.latency_min is None else min(rec.latency_min, latency)
            rec.latency_max = latency if rec.latency_max is None else max(rec.latency_max, latency)
            self.store.put(component, json.dumps(asdict(rec)).encode())
            return StatRecord(**asdict(rec))

    def query(self, component: str) -> StatRecord:
        with self._lock:
            try:
                return StatRecord(**asdict(self._records[component]))
            except KeyError:
                raise UnknownComponent(f"no statistics for {component!r}") from None

    def components(self) -> list[str]:
        return sorted(self._records)


def record_stat(stats: UsageStatistics, component: str, outcome: str, latency: int = 0) -> StatRecord:
    return stats.record(component, outcome, latency)


def query_stats(stats: UsageStatistics, component: str) -> StatRecord:
    return stats.query(component)


@dataclass
class Indicator:
    id: str
    severity: str
    source: str
    message: str
    raised_at: int
    acknowledged: bool = False


class IndicatorBoard:
    """Persisted alerts. Acknowledgement is one-way."""

    SEVERITIES = ("info", "warn", "error")

    def __init__(self, store: DataStore | None = None, clock=None):
        self.clock = clock or ManualClock()
        self.store = store if store is not None else _memory_store("indicators", self.clock)
        self._items: dict[str, Indicator] = {}
        self._lock = threading.Lock()
        for key in self.store.query():
            self._items[key] = Indicator(**json.loads(self.store.get(key)))

    def _save(self, ind: Indicator) -> None:
        self.store.put(ind.id, json.dumps(asdict(ind)).encode())

    def raise_indicator(self, severity: str, source: str, message: str) -> Indicator:
        if severity not in self.SEVERITIES:
            raise ValueError(f"unknown severity {severity!r}")
        with self._lock:
            ind = Indicator(f"ind-{len(self._items) + 1:06d}", severity, source, message, self.clock.now())
            self._items[ind.id] = ind
            self._save(ind)
            return Indicator(**asdict(ind))

    def acknowledge(self, indicator_id: str) -> Indicator:
        with self._lock:
            ind = self._items[indicator_id]
            if not ind.acknowledged:
                ind.acknowledged = True
                self._save(ind)
            return Indicator(**asdict(ind))

    def query(self, severity: str | None = None, unacknowledged: bool = False) -> list[Indicator]:
        with self._lock:
            return [
                Indicator(**asdict(i))
                for i in sorted(self._items.values(), key=lambda i: i.id)
                if (severity is None or i.severity == severity) and not (unacknowledged and i.acknowledged)
            ]

    def __len__(self) -> int:
        return len(self._items)


class InactivityDetector:
    """Raises one indicator per continuous idle episode longer than the threshold."""

    def __init__(self, board: IndicatorBoard, clock=None):
        self.board = board
        self.clock = clock or board.clock
        self._last: dict[str, int] = {}
        self._thresholds: dict[str, int] = {}
        self._alerted: set[str] = set()
        self._lock = threading.Lock()

    def register(self, component: str, threshold: int) -> None:
        with self._lock:
            self._thresholds[component] = threshold
            self._last.setdefault(component, self.clock.now())

    def touch(self, component: str) -> None:
        with self._lock:
            self._last[component] = self.clock.now()
            self._alerted.discard(component)

    def check(self, component: str, threshold: int | None = None) -> Indicator | None:
        with self._lock:
            if component not in self._last:
                raise UnknownComponent(f"{component!r} is not tracked")
            limit = self._thresholds.get(component) if threshold is None else threshold
            idle = self.clock.now() - self._last[component]
            if limit is None or idle <= limit or component in self._alerted:
                return None
            self._alerted.add(component)
        return self.board.raise_indicator("warn", component, f"no activity for {idle} ticks")

    def check_all(self) -> list[Indicator]:
        raised = [self.check(c) for c in sorted(self._thresholds)]
        return [i for i in raised if i is not None]


def detect_inactivity(detector: InactivityDetector, component: str, threshold: int) -> Indicator | None:
    return detector.check(component, threshold)


class MessageMonitor:
    """History snapshots of the most recent ``capacity`` exchanges, by message id."""

    def __init__(self, capacity: int = 10_000):
        self.capacity = capacity
        self._items: OrderedDict[str, tuple] = OrderedDict()
        self._lock = threading.Lock()

    def record(self, exchange) -> None:
        with self._lock:
            key = exchange.instance
            self._items.pop(key, None)
            self._items[key] = exchange.history
            while len(self._items) > self.capacity:
                self._items.popitem(last=False)

    def lookup(self, message_id: str) -> tuple:
        with self._lock:
            try:
                return self._items[message_id]
            except KeyError:
                raise UnknownMessage(f"no history for message {message_id!r}") from None


class Subscription:
    def __init__(self, queues: "SanityQueues", topic: str, offset: int):
        self.queues = queues
        self.topic = topic
        self.offset = offset

    def poll(self) -> list:
        events, self.offset = self.queues._read(self.topic, self.offset)
        return events

    def __iter__(self):
        return iter(self.poll())


class SanityQueues:
    """Named persistent event queues. Each subscriber reads every retained
    event from its own cursor; at most ``capacity`` events are retained."""

    def __init__(self, store: DataStore | None = None, capacity: int = 1000):
        self.store = store if store is not None else _memory_store("sanity", None)
        self.capacity = capacity
        self._topics: dict[str, deque] = {}
        self._next: Counter = Counter()
        self._lock = threading.Lock()
        for key in self.store.query():
            topic, _, offset = key.rpartition("/")
            self._topics.setdefault(topic, deque()).append((int(offset), json.loads(self.store.get(key))))
            self._next[topic] = max(self._next[topic], int(offset) + 1)

    def publish(self, topic: str, event) -> int:
        with self._lock:
            queue = self._topics.setdefault(topic, deque())
            offset = self._next[topic]
            self._next[topic] += 1
            queue.append((offset, event))
            self.store.put(f"{topic}/{offset:012d}", json.dumps(event).encode())
            while len(queue) > self.capacity:
                old, _ = queue.popleft()
                self.store.delete(f"{topic}/{old:012d}")
            return offset

    def subscribe(self, topic: str) -> Subscription:
        return Subscription(self, topic, 0)

    def _read(self, topic: str, offset: int):
        with self._lock:
            events = [(o, e) for o, e in self._topics.get(topic, ()) if o >= offset]
            if not events:
                return [], max(offset, self._next[topic])
            return [e for _, e in events], events[-1][0] + 1

    def retained(self, topic: str) -> int:
        return len(self._topics.get(topic, ()))


def sanity_publish(queues: SanityQueues, topic: str, event) -> int:
    return queues.publish(topic, event)


def sanity_subscribe(queues: SanityQueues, topic: str) -> Subscription:
    return queues.subscribe(topic)


@dataclass
class _Job:
    name: str
    fn: Callable[[int], object]
    cadence: int
    anchor: int
    last_fired: int | None = None

    def next_slot(self) -> int:
        base = self.anchor if self.last_fired is None else self.last_fired
        return base + self.cadence


class PersistentScheduler:
    """Fires jobs on a fixed cadence grid and persists the last fired slot.

    A restarted scheduler resumes the grid from the persisted slot. If
    slots were missed while it was down, it fires once to catch up (never
    a backfill burst) and continues from the latest missed slot.
    """

    def __init__(self, store: DataStore | None = None, clock=None, auto: bool = True):
        self.clock = clock or ManualClock()
        self.store = store if store is not None else _memory_store("scheduler", self.clock)
        self.fired: list[tuple[str, int, int]] = []  # (job, slot, fired at)
        self._jobs: dict[str, _Job] = {}
        self._lock = threading.RLock()
        self._attached = False
        if auto and isinstance(self.clock, ManualClock):
            self.clock.add_listener(self._on_tick)
            self._attached = True

    def register(self, name: str, fn: Callable[[int], object], cadence: int) -> None:
        if cadence < 1:
            raise ValueError("cadence must be at least one tick")
        with self._lock:
            job = _Job(name, fn, cadence, self.clock.now())
            key = f"sched/{name}"
            if self.store.contains(key):
                state = json.loads(self.store.get(key))
                job.anchor = state["anchor"]
                job.last_fired = state["lastFiredAt"]
            else:
                self._persist(job)
            self._jobs[name] = job
            self.run_pending()

    def _persist(self, job: _Job) -> None:
        payload = {"anchor": job.anchor, "lastFiredAt": job.last_fired, "cadence": job.cadence}
        self.store.put(f"sched/{job.name}", json.dumps(payload).encode())

    def _on_tick(self, now: int) -> None:
        self.run_pending(now)

    def run_pending(self, now: int | None = None) -> int:
        now = self.clock.now() if now is None else now
        fired = 0
        with self._lock:
            for job in self._jobs.values():
                slot = job.next_slot()
                if now < slot:
                    continue
                missed = (now - slot) // job.cadence
                slot += missed * job.cadence
                job.last_fired = slot
                self._persist(job)
                self.fired.append((job.name, slot, now))
                fired += 1
                job.fn(now)
        return fired

    def fire_count(self, name: str) -> int:
        return sum(1 for job, _, _ in self.fired if job == name)

    def stop(self) -> None:
        if self._attached:
            self.clock.remove_listener(self._on_tick)
            self._attached = False


def scheduler_register(scheduler: PersistentScheduler, name: str, fn, cadence: int) -> None:
    scheduler.register(name, fn, cadence)


@dataclass(frozen=True)
class LockLease:
    lock_name: str
    holder: str
    acquired_at: int
    lease: int

    def live(self, now: int) -> bool:
        return now <= self.acquired_at + self.lease


class ClusterLock:
    """Persistent lease locks: one live holder per name; leases lapse on their own."""

    def __init__(self, store: DataStore | None = None, clock=None):
        self.clock = clock or ManualClock()
        self.store = store if store is not None else _memory_store("locks", self.clock)
        self._lock = threading.Lock()

    def _current(self, name: str) -> LockLease | None:
        key = f"lock/{name}"
        if not self.store.contains(key):
            return None
        lease = LockLease(**json.loads(self.store.get(key)))
        return lease if lease.live(self.clock.now()) else None

    def holder(self, name: str) -> LockLease | None:
        with self._lock:
            return self._current(name)

    def acquire(self, name: str, holder: str, lease: int) -> bool:
        if lease < 1:
            raise ValueError("lease must be at least one tick")
        with self._lock:
            current = self._current(name)
            if current is not None and current.holder != holder:
                return False
            grant = LockLease(name, holder, self.clock.now(), lease)
            self.store.put(f"lock/{name}", json.dumps(asdict(grant)).encode())
            return True

    def release(self, name: str, holder: str) -> None:
        with self._lock:
            current = self._current(name)
            if current is None or current.holder != holder:
                raise NotHolder(f"{holder!r} does not hold {name!r}")
            self.store.delete(f"lock/{name}")


def lock_acquire(locks: ClusterLock, name: str, holder: str, lease: int) -> bool:
    return locks.acquire(name, holder, lease)


def lock_release(locks: ClusterLock, name: str, holder: str) -> None:
    locks.release(name, holder)


def scenario_content_statistics(flows: Iterable) -> dict[str, int]:
    """Static count of step types over parsed flow documents, nested steps included."""
    counts: Counter = Counter()
    for flow in flows:
        for step in flow.walk():
            counts[step.type] += 1
    return dict(counts)
