"""The flow execution engine.

A Runtime owns the shared resources (channels, stores, endpoints, breakers,
monitors, security material) and executes FlowDocuments step by step against
one Exchange per message. Unhandled step failures travel up through the
enclosing scopes (subprocess, then flow), each consulting its own handler
chain, and surface as FlowError at the top.
"""

from __future__ import annotations

import random
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import transform as tx
from .clock import ManualClock
from .core import Channel, Exchange, ExceptionRecord, IdSource, Message, Processor, create_message
from .errors import (
    CircuitOpen,
    CommandTimeout,
    DuplicateProcessor,
    EndpointError,
    FlowError,
    FlowStopped,
    FormatMismatch,
    LoopLimitExceeded,
    MulticastFailed,
    ThrownException,
    UnknownComponent,
    UnknownFlow,
    UnknownProcessor,
    UnknownStep,
)
from .expr import Predicate
from .flow import Branch, FlowDocument, Step, Subprocess, instantiate_template, parse_flow, resolve_subprocess
from .handling import ExceptionHandler, record_for, select_handler, validate_message
from .monitoring import InactivityDetector, IndicatorBoard, MessageMonitor, SanityQueues, UsageStatistics
from .reliability import (
    ChannelMonitor,
    CircuitBreaker,
    DeliveryReport,
    EndpointSimulator,
    QosConfig,
    command_execute,
    deliver_with_qos,
    failover_request,
    load_fault_profile,
)
from .security import AuditLog, MessageSecurity, TokenService, authorize, propagate_principal
from .stores import DataStore, KeyStore, SecureStore, TrustStore

SEC_HEADERS = ("sec.token", "sec.principal")


class _StepFailure(Exception):
    """Internal carrier for an unhandled failure travelling up the scopes."""

    def __init__(self, record: ExceptionRecord, cause: BaseException | None = None):
        super().__init__(record.message)
        self.record = record
        self.cause = cause


@dataclass
class JoinHandle:
    inputs: list
    output: Channel
    forwarded: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def close(self) -> None:
        for ch in self.inputs:
            ch.set_consumer(None)


class Runtime:
    """One integration runtime instance.

    ``data_dir`` makes stores, statistics, indicators and the audit log
    persistent; without it everything lives in memory. ``seed`` fixes every
    random source (message ids, generated keys, token ids).
    """

    def __init__(self, clock=None, seed: int = 0, data_dir: str | Path | None = None, inbox_capacity: int = 1000):
        self.clock = clock or ManualClock()
        self.seed = seed
        self.rng = random.Random(seed)
        self.ids = IdSource(random.Random(seed))
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.inbox_capacity = inbox_capacity
        self._stores: dict[str, DataStore] = {}
        self.audit = AuditLog(self.data_dir / "audit.log" if self.data_dir else None, self.clock)
        self.keystore = KeyStore(self.audit)
        self.truststore = TrustStore(self.audit)
        self.securestore = SecureStore(self.clock, self.audit)
        self.tokens = TokenService(self.securestore, self.clock, self.audit, random.Random(seed + 1))
        self.security = MessageSecurity(self.keystore, self.truststore, audit=self.audit)
        self.stats = UsageStatistics(self.store("stats"))
        self.indicators = IndicatorBoard(self.store("indicators"), self.clock)
        self.activity = InactivityDetector(self.indicators, self.clock)
        self.monitor = MessageMonitor()
        self.sanity = SanityQueues(self.store("sanity"))
        self.channel_monitor = ChannelMonitor()
        self.flows: dict[str, FlowDocument] = {}
        self.shared_subprocesses: dict[str, Subprocess] = {}
        self.processors: dict[str, Processor] = {}
        self.endpoints: dict[str, EndpointSimulator] = {}
        self.breakers: dict[str, CircuitBreaker] = {}
        self.channels: dict[str, Channel] = {}
        self._step_listeners: dict[tuple[str, str], list[Callable]] = {}
        self._skipped: set[tuple[str, str]] = set()
        self._stopped: set[str] = set()
        self._paused: set[str] = set()
        self._stop_all = False
        self._control = threading.RLock()

    # resources

    def store(self, name: str) -> DataStore:
        if name not in self._stores:
            self._stores[name] = DataStore(name, self.data_dir, self.clock)
        return self._stores[name]

    def channel(self, name: str, capacity: int = 100, mode: str = "queue", format: str | None = None) -> Channel:
        if name not in self.channels:
            ch = Channel(name, capacity, mode, format)
            ch.on_listener_error = lambda exc, n=name: self.audit.append("interceptor-error", n, repr(exc))
            self.channels[name] = ch
        return self.channels[name]

    def inbox(self, flow: str) -> Channel:
        return self.channel(f"inbox:{flow}", self.inbox_capacity)

    def register_endpoint(self, endpoint: EndpointSimulator) -> EndpointSimulator:
        self.endpoints[endpoint.name] = endpoint
        return endpoint

    def endpoint(self, name: str) -> EndpointSimulator:
        try:
            return self.endpoints[name]
        except KeyError:
            raise UnknownComponent(f"no endpoint {name!r}") from None

    def breaker(self, endpoint: str, **config) -> CircuitBreaker:
        if endpoint not in self.breakers:
            self.breakers[endpoint] = CircuitBreaker(clock=self.clock, **config)
        return self.breakers[endpoint]

    def register_processor(self, name: str, implementation: Callable, kind: str = "custom", **config) -> Processor:
        if name in self.processors:
            raise DuplicateProcessor(f"processor {name!r} already registered")
        proc = Processor(name, implementation, kind, dict(config))
        self.processors[name] = proc
        return proc

    def register_subprocess(self, name: str, steps: Sequence[Step], on_exception: Sequence[ExceptionHandler] = ()) -> Subprocess:
        """Add a shared subprocess usable from every flow in this runtime."""
        sub = Subprocess(list(steps), list(on_exception))
        self.shared_subprocesses[name] = sub
        return sub

    def register_flow(self, flow: FlowDocument | str, bindings: Mapping[str, object] | None = None) -> FlowDocument:
        doc = flow if isinstance(flow, FlowDocument) else parse_flow(flow, self.shared_subprocesses)
        if doc.parameters:
            doc = instantiate_template(doc, bindings or {}, self.shared_subprocesses)
        self.provision(doc.resources)
        self.flows[doc.name] = doc
        self.inbox(doc.name)
        return doc

    def provision(self, resources: Mapping) -> None:
        """Create the keys and endpoints a flow declares, unless already present."""
        for alias in resources.get("keys", ()):
            if alias not in self.keystore.aliases():
                pair = self.keystore.generate(alias, self.rng)
                self.truststore.add(alias, pair.certificate)
        for name, spec in resources.get("endpoints", {}).items():
            if name not in self.endpoints:
                self.register_endpoint(EndpointSimulator.from_profile(name, spec, seed=self.seed, ids=self.ids))

    def create_message(self, body: bytes = b"", headers: Mapping[str, str] | None = None, **kw) -> Message:
        return create_message(body, headers, ids=self.ids, **kw)

    def flow(self, name: str) -> FlowDocument:
        try:
            return self.flows[name]
        except KeyError:
            raise UnknownFlow(f"no flow {name!r}") from None

    # interception and control

    def intercept(self, boundary: str | Channel, listener: Callable[[Message], None]) -> Callable[[], None]:
        """Attach a read-only listener to a channel or to a ``flow/step`` boundary.

        Returns a function that detaches it. Listener errors are swallowed
        and audited.
        """
        if isinstance(boundary, Channel):
            if boundary.on_listener_error is None:
                boundary.on_listener_error = lambda exc: self.audit.append("interceptor-error", boundary.name, repr(exc))
            return boundary.add_interceptor(listener)
        if boundary in self.channels:
            return self.channels[boundary].add_interceptor(listener)
        flow_name, _, step_name = boundary.partition("/")
        doc = self.flow(flow_name)
        if step_name not in doc.step_names():
            raise UnknownStep(f"no step {step_name!r} in flow {flow_name!r}")
        listeners = self._step_listeners.setdefault((flow_name, step_name), [])
        listeners.append(listener)
        return lambda: listeners.remove(listener)

    def _notify_step(self, flow: str, step: str, message: Message) -> None:
        for listener in list(self._step_listeners.get((flow, step), ())):
            try:
                listener(message)
            except Exception as exc:
                self.audit.append("interceptor-error", f"{flow}/{step}", repr(exc))

    def control(self, action: str, target: str | None = None) -> str:
        """skip / unskip ``flow/step``; stopLocal, start, pause, resume ``flow``; stopAll."""
        with self._control:
            if action == "stopAll":
                self._stop_all = True
                self.audit.append("config-change", "runtime", "stopAll")
                return "ok"
            if target is None:
                raise ValueError(f"{action} needs a target")
            if action in ("skip", "unskip"):
                flow_name, _, step_name = target.partition("/")
                doc = self.flow(flow_name)
                if step_name not in doc.step_names():
                    raise UnknownStep(f"no step {step_name!r} in flow {flow_name!r}")
                (self._skipped.add if action == "skip" else self._skipped.discard)((flow_name, step_name))
            else:
                self.flow(target)
                if action == "stopLocal":
                    self._stopped.add(target)
                elif action == "start":
                    self._stopped.discard(target)
                elif action == "pause":
                    self._paused.add(target)
                elif action == "resume":
                    self._paused.discard(target)
                else:
                    raise ValueError(f"unknown control action {action!r}")
            self.audit.append("config-change", "runtime", f"{action} {target}")
        if action == "resume":
            self.process_pending(target)
        return "ok"

    def pause(self, flow: str) -> str:
        return self.control("pause", flow)

    def resume(self, flow: str) -> str:
        return self.control("resume", flow)

    def stop(self, flow: str | None = None) -> str:
        return self.control("stopAll") if flow is None else self.control("stopLocal", flow)

    def _admit(self, name: str) -> None:
        if self._stop_all or name in self._stopped:
            raise FlowStopped(f"flow {name!r} is not accepting messages")

    def submit(self, flow: str, message: Message) -> Exchange | None:
        """Admit a message. Paused flows queue it and return None."""
        with self._control:
            self._admit(flow)
            self.flow(flow)
            if flow in self._paused:
                self.inbox(flow).send(message)
                return None
        return self.run_flow(flow, message)

    def process_pending(self, flow: str) -> list:
        """Run every queued message of ``flow``; returns Exchanges or FlowErrors in order."""
        results = []
        if flow in self._paused:
            return results
        inbox = self.inbox(flow)
        while (msg := inbox.receive()) is not None:
            try:
                results.append(self._execute(self.flow(flow), msg))
            except FlowError as err:
                results.append(err)
        return results

    # execution

    def _resolve(self, flow, bindings) -> FlowDocument:
        if isinstance(flow, str):
            return self.flow(flow)
        if flow.parameters:
            flow = instantiate_template(flow, bindings or {}, self.shared_subprocesses)
        self.provision(flow.resources)
        return flow

    def run_flow(self, flow: FlowDocument | str, message: Message, bindings: Mapping[str, object] | None = None) -> Exchange:
        doc = self._resolve(flow, bindings)
        with self._control:
            self._admit(doc.name)
        return self._execute(doc, message)

    def _execute(self, doc: FlowDocument, message: Message) -> Exchange:
        ex = Exchange(message, doc.name)
        start = self.clock.now()
        try:
            self._run_scope(doc, doc.steps, doc.on_exception, ex, "")
        except _StepFailure as failure:
            ex.exception = failure.record
            self.stats.record(doc.name, "failure", self.clock.now() - start)
            self.monitor.record(ex)
            self.activity.touch(doc.name)
            raise FlowError(failure.record, ex) from failure.cause
        ex.exception = None
        self.stats.record(doc.name, "cancellation" if ex.cancelled else "success", self.clock.now() - start)
        self.monitor.record(ex)
        self.activity.touch(doc.name)
        return ex

    def _run_scope(self, doc: FlowDocument, steps, handlers, ex: Exchange, prefix: str) -> None:
        try:
            self._run_steps(doc, steps, ex, prefix)
        except _StepFailure as failure:
            handler = select_handler(handlers, failure.record.kind)
            if handler is None:
                raise
            rec = failure.record
            ex.exception = rec
            ex.properties.update({"exception.kind": rec.kind, "exception.message": rec.message,
                                  "exception.step": rec.raising_step})
            self._run_steps(doc, handler.steps, ex, prefix + "catch/")
            if handler.mode == "rethrow":
                raise
            ex.exception = None

    def _run_steps(self, doc: FlowDocument, steps, ex: Exchange, prefix: str) -> None:
        for step in steps:
            if ex.cancelled:
                return
            self._run_step(doc, step, ex, prefix)

    def _run_step(self, doc: FlowDocument, step: Step, ex: Exchange, prefix: str) -> None:
        label = prefix + step.name
        component = f"{doc.name}/{step.name}"
        if (doc.name, step.name) in self._skipped:
            ex.record(label, self.clock.now(), "skipped")
            return
        policy = step.redelivery
        snapshot = (ex.message, dict(ex.properties), ex.variables.copy())
        failures = 0
        while True:
            start = self.clock.now()
            try:
                self._dispatch(doc, step, ex, prefix)
            except Exception as exc:
                failures += 1
                if isinstance(exc, _StepFailure):
                    rec, cause = exc.record, exc.cause
                else:
                    rec, cause = record_for(exc, label), exc
                ex.record(label, self.clock.now(), "failed")
                self.stats.record(component, "failure", self.clock.now() - start)
                if policy is not None and failures < policy.max_attempts:
                    ex.message, props, variables = snapshot
                    ex.properties = dict(props)
                    ex.variables = variables.copy()
                    wait = policy.delay(failures - 1)
                    if wait:
                        self.clock.sleep(wait)
                    continue
                if policy is not None:
                    rec = ExceptionRecord(rec.kind, rec.message, rec.raising_step, failures)
                raise _StepFailure(rec, cause) from None
            outcome = "cancelled" if ex.cancelled else "ok"
            ex.record(label, self.clock.now(), outcome)
            self.stats.record(component, "cancellation" if ex.cancelled else "success", self.clock.now() - start)
            if failures:
                ex.properties["redelivery.attempts"] = str(failures)
            self._notify_step(doc.name, step.name, ex.message)
            return

    def _dispatch(self, doc: FlowDocument, step: Step, ex: Exchange, prefix: str) -> None:
        handler = _HANDLERS.get(step.type)
        if handler is not None:
            handler(self, doc, step, ex, prefix)
            return
        if step.type.startswith("custom:"):
            name = step.type[len("custom:"):]
            proc = self.processors.get(name)
            if proc is None:
                raise UnknownProcessor(f"no processor {name!r}")
            result = proc(ex.message, ex, step.config)
            if isinstance(result, (bytes, bytearray)):
                ex.message = ex.message.with_body(bytes(result))
            elif isinstance(result, Message):
                ex.message = result
            return
        raise UnknownStep(f"unknown step type {step.type!r}")

    # routing

    def multicast(self, exchange: Exchange, branches: Sequence[Branch], mode: str = "sequential",
                  doc: FlowDocument | None = None) -> list[Exchange]:
        """Run every branch on its own copy; results follow declaration order."""
        if not branches:
            raise ValueError("multicast needs at least one branch")
        names = [b.name for b in branches]
        if len(set(names)) != len(names):
            raise ValueError("branch names must be unique")
        doc = doc or FlowDocument(exchange.flow or "adhoc")
        forks = [exchange.fork() for _ in branches]

        def run(i: int) -> Exchange:
            fork = forks[i]
            try:
                self._run_steps(doc, branches[i].steps, fork, "")
            except _StepFailure as failure:
                fork.exception = failure.record
            return fork

        if mode == "parallel" and len(branches) > 1:
            with ThreadPoolExecutor(max_workers=len(branches)) as pool:
                results = list(pool.map(run, range(len(branches))))
        elif mode in ("sequential", "parallel"):
            results = [run(i) for i in range(len(branches))]
        else:
            raise ValueError(f"unknown multicast mode {mode!r}")
        exchange.branches = results
        if all(r.exception is not None for r in results):
            raise MulticastFailed(f"all {len(results)} branches failed")
        return results

    def join_router(self, inputs: Sequence[Channel], output: Channel) -> JoinHandle:
        """Forward every message from each input to ``output`` unmodified."""
        if len(inputs) < 2:
            raise ValueError("a join router needs at least two inputs")
        formats = {ch.format for ch in inputs}
        if len(formats) > 1:
            raise FormatMismatch(f"inputs carry different formats {sorted(map(str, formats))}")
        handle = JoinHandle(list(inputs), output)

        def forward(message: Message) -> None:
            with handle._lock:  # serialized per output
                output.send(message)
                handle.forwarded += 1

        for ch in inputs:
            for pending in ch.drain():
                forward(pending)
            ch.set_consumer(forward)
        return handle

    def delegate(self, exchange: Exchange, target: str, mode: str = "sync"):
        """Hand the message to another flow of this runtime.

        The principal headers cross the boundary only when propagation was
        requested on this exchange.
        """
        doc = self.flow(target)
        message = exchange.message
        if exchange.properties.get("sec.propagate") != "true":
            message = message.without_headers(*SEC_HEADERS)
        if mode == "async":
            with self._control:
                self._admit(target)
            return self.inbox(target).send(message)
        if mode != "sync":
            raise ValueError(f"unknown delegate mode {mode!r}")
        with self._control:
            self._admit(target)
        try:
            result = self._execute(doc, message)
        except FlowError as err:
            raise _StepFailure(err.record, err) from None
        exchange.message = result.message
        return result

    def loop(self, exchange: Exchange, body: Sequence[Step], condition: str, max_iterations: int,
             fail_mode: str = "fail", doc: FlowDocument | None = None, source: str = "loop") -> Exchange:
        if max_iterations < 1:
            raise ValueError("maxIterations must be at least 1")
        pred = Predicate(condition)
        doc = doc or FlowDocument(exchange.flow or "adhoc")
        count = 0
        exchange.properties["loop.count"] = "0"
        while count < max_iterations and pred.evaluate(exchange):
            self._run_steps(doc, body, exchange, "")
            count += 1
            exchange.properties["loop.count"] = str(count)
            if exchange.cancelled:
                return exchange
        if count == max_iterations and pred.evaluate(exchange):
            if fail_mode == "fail":
                raise LoopLimitExceeded(f"condition still true after {max_iterations} iterations")
            self.indicators.raise_indicator("warn", source, f"loop limit {max_iterations} reached")
        return exchange

    def call_subprocess(self, exchange: Exchange, name: str, doc: FlowDocument | None = None, prefix: str = "") -> Exchange:
        doc = doc or (self.flows.get(exchange.flow) or FlowDocument(exchange.flow or "adhoc"))
        sub = resolve_subprocess(doc, name, self.shared_subprocesses)
        self._run_scope(doc, sub.steps, sub.on_exception, exchange, f"{prefix}sub:{name}/")
        return exchange

    # endpoints

    def _breaker_for(self, name: str, spec) -> CircuitBreaker | None:
        if not spec:
            return self.breakers.get(name)
        if isinstance(spec, Mapping):
            return self.breaker(name, window=int(spec.get("window", 20)),
                                error_threshold=float(spec.get("threshold", 0.5)),
                                open_duration=int(spec.get("openDuration", 50)))
        return self.breaker(name)

    def call_endpoint(self, ex: Exchange, name: str, timeout: int = 10, breaker=None) -> None:
        endpoint = self.endpoint(name)
        result = command_execute(endpoint, ex.message, timeout, self._breaker_for(name, breaker),
                                 monitor=self.channel_monitor)
        _raise_for(result.outcome, name)
        self._apply_reply(ex, result.response, name)

    def simulate(self, flow: FlowDocument | str, faults: Mapping | str, seed: int | None = None,
                 messages: int | None = None, raise_on_exhausted: bool = False) -> DeliveryReport:
        """Deliver generated messages to the flow's simulation endpoint under its QoS.

        Each message first passes through the flow's own steps (the outbound
        pipeline), then travels under the declared QoS level to the endpoint
        built from the fault profile.
        """
        doc = self._resolve(flow, None)
        qos = doc.qos or {"level": "bestEffort"}
        sim = doc.extras.get("simulation", {})
        sims = load_fault_profile(faults, seed)
        name = sim.get("endpoint") or (sorted(sims)[0] if sims else None)
        if name is None or name not in sims:
            raise UnknownComponent(f"fault profile has no endpoint {name!r}")
        endpoint = self.register_endpoint(sims[name])
        level = qos["level"]
        cfg = QosConfig(level, max_redeliveries=int(qos.get("maxRedeliveries", 10)),
                        dedup_store=self.store(f"dedup-{doc.name}") if level.startswith("exactlyOnce") else None,
                        sequence_header=qos.get("sequenceHeader"), retry_delay=int(qos.get("retryDelay", 5)))
        count = int(messages if messages is not None else sim.get("messages", 100))
        batch = []
        for i in range(count):
            msg = self.create_message(f"message-{i}".encode(), {"index": str(i)})
            batch.append(self._execute(doc, msg).message if doc.steps else msg)
        return deliver_with_qos(cfg, batch, endpoint, clock=self.clock, raise_on_exhausted=raise_on_exhausted)

    def _apply_reply(self, ex: Exchange, reply: Message, name: str) -> None:
        headers = {k: v for k, v in reply.headers.items() if k != "status"}
        headers["status"] = reply.headers.get("status", "ok")
        headers["endpoint"] = name
        ex.message = ex.message.with_body(reply.body).with_headers(headers)


def _raise_for(outcome: str, name: str) -> None:
    if outcome == "ok":
        return
    if outcome == "timedOut":
        raise CommandTimeout(f"{name} timed out")
    if outcome == "shortCircuited":
        raise CircuitOpen(f"circuit for {name} is open")
    raise EndpointError(f"{name} returned {outcome}")


# step handlers: fn(runtime, doc, step, exchange, prefix)


def _msg_step(fn: Callable[[Message, dict], Message]):
    def run(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
        ex.message = fn(ex.message, step.config)
    return run


def _replace(m: Message, c: dict) -> Message:
    if "dictionary" in c:
        return tx.find_replace(m, c["dictionary"])
    return tx.find_replace(m, c["pattern"], c.get("replacement", ""))


def _step_multicast(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    rt.multicast(ex, step.branches, step.config.get("mode", "sequential"), doc)


def _step_join(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    fmt = step.config.get("format")
    out = rt.channel(step.config["output"], format=fmt)
    if fmt is not None and out.format is not None and out.format != fmt:
        raise FormatMismatch(f"channel {out.name!r} carries {out.format}, step declares {fmt}")
    out.send(ex.message)


def _step_delegate(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    rt.delegate(ex, step.config["target"], step.config.get("mode", "sync"))


def _step_loop(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    rt.loop(ex, step.steps, step.config["condition"], int(step.config["maxIterations"]),
            step.config.get("failMode", "fail"), doc, f"{doc.name}/{step.name}")


def _step_choice(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    for branch in step.branches:
        if branch.condition is None or Predicate(branch.condition).evaluate(ex):
            rt._run_steps(doc, branch.steps, ex, prefix)
            return


def _step_subprocess(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    rt.call_subprocess(ex, step.config["subprocess"], doc, prefix)


def _step_encrypt(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    ex.message = rt.security.encrypt_message(ex.message, step.config["keyAlias"], step.config.get("parts", ("body",)))


def _step_decrypt(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    ex.message = rt.security.decrypt_message(ex.message, step.config["keyAlias"])


def _step_sign(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    ex.message = rt.security.sign_message(ex.message, step.config["keyAlias"])


def _step_verify(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    rt.security.verify_message(ex.message, step.config["trustAlias"])
    ex.properties["verified"] = "true"


def _step_authorize(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    authorize(ex, step.config["roles"], rt.tokens, rt.audit)


def _step_propagate(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    propagate_principal(ex)


def _step_throw(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    raise ThrownException(step.config["kind"], step.config.get("message", ""))


def _step_validate(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    validate_message(ex, step.config["rules"])


def _step_indicator(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    rt.indicators.raise_indicator(step.config.get("severity", "info"), f"{doc.name}/{step.name}",
                                  f"{step.config['message']} ({ex.message.id})")


def _step_cancel(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    if Predicate(step.config["condition"]).evaluate(ex):
        ex.cancelled = True


def _step_publish(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    rt.sanity.publish(step.config["topic"], {"message": ex.message.id, "flow": doc.name, "step": step.name})


def _step_persist(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    c = step.config
    key = ex.message.headers.get(c["keyHeader"]) if "keyHeader" in c else c.get("key", ex.message.id)
    ttl = c.get("ttl")
    rt.store(c["store"]).put(key, ex.message.body, None if ttl is None else int(ttl),
                             c.get("visibility", "global"), doc.name)


def _step_variable(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    c = step.config
    name = c["variable"]
    if "toHeader" in c:
        ex.message = ex.message.with_header(c["toHeader"], ex.variables.get(name))
        return
    if "value" in c:
        value = str(c["value"])
    elif "fromHeader" in c:
        value = ex.message.headers.get(c["fromHeader"], "")
    else:
        value = ex.message.body.decode("utf-8", errors="replace")
    ex.variables.set(name, value)


def _step_call(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    rt.call_endpoint(ex, str(step.config["endpoint"]), int(step.config.get("timeout", 10)), step.config.get("breaker"))


def _step_failover(rt: Runtime, doc, step: Step, ex: Exchange, prefix: str) -> None:
    names = list(step.config["endpoints"])
    result = failover_request([rt.endpoint(n) for n in names], ex.message, int(step.config.get("timeout", 10)),
                              rt.breakers, rt.channel_monitor, rt.audit)
    rt._apply_reply(ex, result.response, result.endpoint)


_HANDLERS: dict[str, Callable] = {
    "map": _msg_step(lambda m, c: tx.map_message(m, [tx.MappingRule.from_dict(r) for r in c["rules"]],
                                                 c.get("onMissing", "fail"))),
    "encode": _msg_step(lambda m, c: tx.encode(m, c.get("scheme", "base64"))),
    "decode": _msg_step(lambda m, c: tx.decode(m, c.get("scheme", "base64"))),
    "marshal": _msg_step(lambda m, c: tx.marshal(m, c.get("to", "xml"))),
    "unmarshal": _msg_step(lambda m, c: tx.unmarshal(m, c.get("format", "xml"))),
    "compress": _msg_step(lambda m, c: tx.compress(m, c.get("algo", "gzip"))),
    "decompress": _msg_step(lambda m, c: tx.decompress(m, c.get("algo", "gzip"))),
    "convert": _msg_step(lambda m, c: tx.type_convert(m, c.get("target", "text-utf8"))),
    "sort": _msg_step(lambda m, c: tx.content_sort(m, c.get("delimiter", ","), c.get("comparator", "lexicographic"))),
    "replace": _msg_step(_replace),
    "metadata": _msg_step(lambda m, c: tx.extract_metadata(m)),
    "wrap": _msg_step(lambda m, c: tx.wrap(m, c["path"])),
    "set-header": _msg_step(lambda m, c: m.with_header(c["header"], str(c["value"]))),
    "remove-header": _msg_step(lambda m, c: m.without_headers(c["header"])),
    "multicast": _step_multicast,
    "join": _step_join,
    "delegate": _step_delegate,
    "loop": _step_loop,
    "choice": _step_choice,
    "subprocess": _step_subprocess,
    "encrypt": _step_encrypt,
    "decrypt": _step_decrypt,
    "sign": _step_sign,
    "verify": _step_verify,
    "authorize": _step_authorize,
    "propagate": _step_propagate,
    "throw": _step_throw,
    "validate": _step_validate,
    "indicator": _step_indicator,
    "cancel": _step_cancel,
    "publish": _step_publish,
    "persist": _step_persist,
    "variable": _step_variable,
    "call": _step_call,
    "failover": _step_failover,
}
