"""Acceptance criteria, one test per criterion.

Each test prints ``PASS`` or ``FAIL`` with its criterion number; the
terminal summary (see conftest.py) repeats the lines after the run.
"""

import base64
import functools
import itertools
import json
import random
import tempfile
import threading
import time
import xml.etree.ElementTree as ET

from patternflow import ManualClock, Runtime, fixture_path
from patternflow import transform as tx
from patternflow.core import Message
from patternflow.errors import FlowError, MulticastFailed, NotHolder, QuorumUnavailable, VerificationFailed
from patternflow.flow import build_flow
from patternflow.monitoring import ClusterLock, IndicatorBoard, PersistentScheduler
from patternflow.reliability import (
    CircuitBreaker,
    CommutativeReceiver,
    EndpointSimulator,
    RequestCache,
    RequestCollapser,
    command_execute,
    commutative_receive,
)
from patternflow.security import AuditLog, MessageSecurity
from patternflow.stores import DataStore, KeyStore, RedundantStore, TrustStore
from patternflow.errors import ChainBroken

ACCEPTANCE_RESULTS: list[str] = []


def criterion(number: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run():
            try:
                detail = fn()
            except BaseException as exc:
                line = f"FAIL [{number}] {title}: {type(exc).__name__}: {exc}"
                ACCEPTANCE_RESULTS.append(line)
                print(line)
                raise
            line = f"PASS [{number}] {title}" + (f" ({detail})" if detail else "")
            ACCEPTANCE_RESULTS.append(line)
            print(line)
        return run
    return wrap


# 1. eDocument scenario

def _edoc_runtime(data_dir=None):
    rt = Runtime(ManualClock(), seed=42, data_dir=data_dir)
    rt.register_flow(fixture_path("edocument.json").read_text())
    return rt


def _factura(rt, mode):
    return rt.create_message(fixture_path("factura.xml").read_bytes(), {"delivery-mode": mode})


@criterion(1, "eDocument scenario")
def test_edocument_scenario():
    started = time.perf_counter()
    rt = _edoc_runtime()
    signed = []
    rt.intercept("edocument-es/sign", signed.append)
    face = rt.endpoint("face-sim")

    # (a) signature verifies in-flow, and every single-bit tamper of the signed body fails
    ex = rt.run_flow("edocument-es", _factura(rt, "automatic"))
    assert ex.properties["verified"] == "true"
    original = signed[0]
    rt.security.verify_message(original, "sign-es")
    for bit in range(len(original.body) * 8):
        body = bytearray(original.body)
        body[bit // 8] ^= 1 << (bit % 8)
        try:
            rt.security.verify_message(original.with_body(bytes(body)), "sign-es")
        except VerificationFailed:
            continue
        raise AssertionError(f"tamper at bit {bit} not detected")

    # (b) the payload on the wire is Base64 of the signed factura (stdlib codec as reference)
    request = face.requests[0]
    payload = ET.fromstring(request.body).find("factura").text
    decoded = base64.b64decode(payload, validate=True)
    assert decoded == original.body
    assert json.loads(decoded)["factura"]["numero"] == "2015-000117"
    rt.security.verify_message(request.with_body(decoded), "sign-es")

    # (d) automatic: exactly one FACe request, response prepared
    assert face.received == 1
    assert ex.message.headers["edoc.status"] == "sent" and b"registrada" in ex.message.body

    # (c) manual: exactly one persisted indicator, no FACe traffic
    with tempfile.TemporaryDirectory() as data:
        manual_rt = _edoc_runtime(data)
        manual = manual_rt.run_flow("edocument-es", _factura(manual_rt, "manually"))
        assert manual.message.headers["edoc.status"] == "manual"
        assert manual_rt.endpoint("face-sim").received == 0
        reloaded = IndicatorBoard(DataStore("indicators", data), ManualClock())
        assert [i.severity for i in reloaded.query()] == ["warn"]
        assert reloaded.query()[0].source == "edocument-es/alert-manual"

    # (e) injected endpoint failure lands in the catch-all exception subprocess
    fail_rt = _edoc_runtime()
    fail_rt.endpoint("face-sim").script("error")
    failed = fail_rt.run_flow("edocument-es", _factura(fail_rt, "automatic"))
    steps = [(h.step, h.outcome) for h in failed.history]
    first_fail = steps.index(("send-face", "failed"))
    handler = [s for s in steps if s[0].startswith("catch/")]
    assert handler == [("catch/sub:exception-flow/mark-failed", "ok"), ("catch/sub:exception-flow/alert-failure", "ok"),
                       ("catch/sub:exception-flow/report-failure", "ok"), ("catch/handle-exception", "ok")]
    assert all(steps.index(h) > first_fail for h in handler)
    assert "prepare-response" not in [s for s, _ in steps]
    assert failed.message.headers["edoc.status"] == "failed"
    assert [i.severity for i in fail_rt.indicators.query()] == ["error"]
    assert fail_rt.monitor.lookup(failed.instance) == failed.history

    elapsed = time.perf_counter() - started
    assert elapsed < 1.0, f"took {elapsed:.3f}s"
    return f"{elapsed * 1000:.0f} ms"


# 2. QoS matrix

def _qos_report(level, seed=42):
    rt = Runtime(ManualClock(), seed=seed)
    doc = build_flow({
        "name": f"qos-{level}",
        "steps": [{"type": "set-header", "header": "origin", "value": "acceptance"}],
        "qos": {"level": level, "sequenceHeader": "seq", "maxRedeliveries": 20},
        "simulation": {"endpoint": "receiver", "messages": 200},
    })
    faults = fixture_path("faults-sample.json").read_text()
    assert json.loads(faults)["endpoints"]["receiver"] == {"sendLoss": 0.1, "ackLoss": 0.2, "latencyTicks": 1}
    return rt.simulate(doc, faults, seed=seed)


@criterion(2, "QoS matrix under 10% send loss and 20% ack loss")
def test_qos_matrix():
    started = time.perf_counter()
    reports = {level: _qos_report(level) for level in
               ("bestEffort", "atLeastOnce", "atMostOnce", "exactlyOnce", "exactlyOnceInOrder")}
    assert reports["bestEffort"].lost > 0
    assert reports["atLeastOnce"].lost == 0 and reports["atLeastOnce"].duplicates_processed > 0
    assert reports["atMostOnce"].duplicates_processed == 0
    assert reports["exactlyOnce"].lost == 0 and reports["exactlyOnce"].duplicates_processed == 0
    eoio = reports["exactlyOnceInOrder"]
    assert eoio.lost == 0 and eoio.duplicates_processed == 0 and eoio.order_violations == 0
    again = {level: _qos_report(level).to_json() for level in reports}
    assert again == {level: r.to_json() for level, r in reports.items()}
    elapsed = time.perf_counter() - started
    assert elapsed < 5.0, f"took {elapsed:.3f}s"
    summary = ", ".join(f"{k} lost={r.lost} dup={r.duplicates_processed}" for k, r in reports.items())
    return f"{summary}; {elapsed * 1000:.0f} ms for both runs"


# 3. Circuit breaker

def rolling_window_oracle(outcomes, window, threshold):
    for i in range(len(outcomes)):
        recent = outcomes[max(0, i - window + 1): i + 1]
        if len(recent) == window and recent.count(False) / window > threshold:
            return i
    return None


@criterion(3, "circuit breaker opening point, open silence and half-open trials")
def test_circuit_breaker():
    clock = ManualClock()
    ep = EndpointSimulator("ep").script(*(["ok"] * 10 + ["error"]))
    br = CircuitBreaker(window=20, error_threshold=0.5, open_duration=50, clock=clock)
    outcomes, opened = [], None
    for i in range(100):
        result = command_execute(ep, Message(f"{i}-0", {}, b""), 5, breaker=br)
        outcomes.append(result.outcome == "ok")
        clock.advance(1)
        if br.state == "Open":
            opened = i
            break
    expected = rolling_window_oracle([True] * 10 + [False] * 90, 20, 0.5)
    assert opened == expected == 20, (opened, expected)
    assert br.opened_at == opened

    def silent_open_period():
        received = ep.received
        while clock.now() < br.opened_at + br.open_duration:
            assert command_execute(ep, Message("x-0", {}, b""), 5, breaker=br).outcome == "shortCircuited"
            assert ep.received == received
            clock.advance(1)
        return received

    # trial failure: back to Open with a fresh timer
    received = silent_open_period()
    assert command_execute(ep, Message("t-0", {}, b""), 5, breaker=br).outcome == "failed"
    assert ep.received == received + 1 and br.state == "Open" and br.opened_at == clock.now()

    # trial success: Closed with a cleared window, stays Closed on 20 oks
    received = silent_open_period()
    ep.script("ok")
    assert br.admit() and br.state == "HalfOpen" and not br.admit()
    br.record(True)
    assert br.state == "Closed" and br.error_fraction() == 0.0
    for i in range(20):
        assert command_execute(ep, Message(f"c{i}-0", {}, b""), 5, breaker=br).outcome == "ok"
    assert br.state == "Closed" and ep.received == received + 20
    return f"opened after request {opened}"


# 4. Request collapsing and caching

@criterion(4, "request collapsing and caching")
def test_collapsing_and_caching():
    clock = ManualClock()
    ep = EndpointSimulator("ep")
    ep.gate = threading.Event()
    collapser = RequestCollapser(ep, window=10, key_fn=lambda m: m.headers["key"], clock=clock)
    results = [None] * 100
    arrived = threading.Barrier(101)

    def caller(i):
        arrived.wait()
        results[i] = collapser.submit(Message(f"{i}-0", {"key": "same"}, f"r{i}".encode()))

    threads = [threading.Thread(target=caller, args=(i,)) for i in range(100)]
    for t in threads:
        t.start()
    arrived.wait()
    deadline = time.monotonic() + 5
    while sum(b.callers for b in collapser._batches.values()) < 100 and time.monotonic() < deadline:
        time.sleep(0.001)
    ep.gate.set()
    for t in threads:
        t.join()
    assert ep.received == 1
    assert all(r is not None and r == results[0] for r in results) and results[0].outcome == "ok"

    rates = []
    for n in (1, 2, 5, 10, 50):
        backend = EndpointSimulator("cached")
        cache = RequestCache(backend, ttl=100, key_fn=lambda m: "k", clock=clock)
        for i in range(n):
            cache.request(Message(f"q{i}-0", {}, b"q"))
        assert backend.received == 1
        assert abs(cache.hit_rate - (n - 1) / n) < 1e-12
        rates.append(f"n={n}:{cache.hit_rate:.2f}")
    return ", ".join(rates)


# 5. Redundant store

@criterion(5, "redundant store N=3 quorum=2")
def test_redundant_store():
    checked = 0
    for down_at_write in [set()] + [{i} for i in range(3)]:
        replicas = [DataStore(f"r{i}") for i in range(3)]
        rs = RedundantStore(replicas, write_quorum=2)
        acknowledged = {}
        for r_i, r in enumerate(replicas):
            r.alive = r_i not in down_at_write
        for k in range(20):
            receipt = rs.put(f"k{k}", f"v{k}".encode())
            assert receipt.acks >= 2
            acknowledged[f"k{k}"] = f"v{k}".encode()
        for r in replicas:
            r.alive = True
        for failed in itertools.chain([()], itertools.combinations(range(3), 1)):
            for r_i, r in enumerate(replicas):
                r.alive = r_i not in failed
            for key, value in acknowledged.items():
                assert rs.get(key) == value, (down_at_write, failed, key)
                checked += 1
        for failed in itertools.combinations(range(3), 2):
            for r_i, r in enumerate(replicas):
                r.alive = r_i not in failed
            try:
                rs.put("rejected", b"x")
            except QuorumUnavailable:
                pass
            else:
                raise AssertionError(f"write accepted with replicas {failed} down")
            assert all(not r.contains("rejected") for r in replicas if r.alive)
    return f"{checked} reads over every single-replica failure"


# 6. Round-trip laws and audit tamper detection

_KEYS = "abcdefghij"


def random_document(rng, depth=0):
    doc = {}
    for _ in range(rng.randrange(0 if depth else 1, 4)):
        key = rng.choice(_KEYS) + str(rng.randrange(10))
        roll = rng.random()
        if depth < 3 and roll < 0.3:
            doc[key] = random_document(rng, depth + 1)
        elif depth < 3 and roll < 0.45:
            doc[key] = [random_text(rng) for _ in range(rng.randrange(1, 4))]
        else:
            doc[key] = random_text(rng)
    return doc


def random_text(rng):
    return "".join(rng.choice("xyz <&>\"' 0123ñé") for _ in range(rng.randrange(0, 10)))


def random_message(rng, i):
    headers = {f"h{j}": random_text(rng) for j in range(rng.randrange(3))}
    return Message(f"{i}-{rng.getrandbits(64):016x}", headers, rng.randbytes(rng.randrange(0, 200)),
                   {"att": rng.randbytes(rng.randrange(1, 20))} if rng.random() < 0.3 else {})


@criterion(6, "round-trip laws on 1000 messages and exhaustive audit tamper detection")
def test_round_trips_and_audit():
    rng = random.Random(2024)
    audit = AuditLog()
    keys, certs = KeyStore(), TrustStore()
    pair = keys.generate("k", rng)
    certs.add("k", pair.certificate)
    security = MessageSecurity(keys, certs)
    for i in range(1000):
        msg = random_message(rng, i)
        for scheme in ("base64", "base16"):
            assert tx.decode(tx.encode(msg, scheme), scheme) == msg
        assert tx.decompress(tx.compress(msg)) == msg
        doc_msg = msg.with_body(json.dumps(random_document(rng), ensure_ascii=False).encode())
        for fmt in ("xml", "json"):
            back = tx.unmarshal(tx.marshal(doc_msg, fmt), fmt)
            assert json.loads(back.body) == json.loads(doc_msg.body)
        parts = rng.sample(["body", "headers", "attachments"], rng.randrange(1, 4))
        assert security.decrypt_message(security.encrypt_message(msg, "k", parts), "k") == msg

    with tempfile.TemporaryDirectory() as tmp:
        clock = ManualClock()
        path = f"{tmp}/audit.log"
        audit = AuditLog(path, clock)
        for i in range(100):
            clock.advance(1)
            audit.append("event", f"actor-{i % 7}", f"detail {i}")
        assert AuditLog.verify_file(path)
        lines = open(path, encoding="utf-8").read().splitlines()
        for i in range(100):
            for field in range(5):
                tampered = list(lines)
                parts = tampered[i].split("|")
                parts[field] = parts[field] + "0" if field < 2 else parts[field] + "!"
                tampered[i] = "|".join(parts)
                tpath = f"{tmp}/t.log"
                with open(tpath, "w", encoding="utf-8") as fh:
                    fh.write("\n".join(tampered) + "\n")
                try:
                    AuditLog.verify_file(tpath)
                except ChainBroken as exc:
                    assert exc.seq == i
                    continue
                raise AssertionError(f"tamper of record {i} field {field} not detected")
    return "4000 transform, 1000 crypto round trips; 500 audit tampers"


# 7. EOIO buffer

@criterion(7, "exactly-once-in-order resequencing")
def test_eoio_buffer():
    n_perm = 0
    for perm in itertools.permutations(range(1, 7)):
        buffer = CommutativeReceiver()
        released = []
        for seq in perm:
            released += commutative_receive(buffer, Message(f"{seq}-0", {"seq": str(seq)}, b""))
        assert [int(m.headers["seq"]) for m in released] == [1, 2, 3, 4, 5, 6]
        n_perm += 1
    rng = random.Random(7)
    for _ in range(200):
        arrivals = list(range(1, 101))
        rng.shuffle(arrivals)
        buffer = CommutativeReceiver()
        released = [x for seq in arrivals for x in buffer.offer(seq)]
        assert released == list(range(1, 101)) and buffer.buffered == 0
    return f"{n_perm} permutations of 6, 200 shuffles of 100"


# 8. Locks and scheduler

def _lock_interleaving(rng):
    clock = ManualClock()
    locks = ClusterLock(clock=clock)
    holders = ["A", "B", "C"]
    segments = []  # [holder, start, end) half-open, end may shrink on release
    for _ in range(rng.randrange(5, 20)):
        op = rng.random()
        who = rng.choice(holders)
        now = clock.now()
        live = [s for s in segments if s[1] <= now < s[2]]
        if op < 0.45:
            lease = rng.randrange(1, 6)
            granted = locks.acquire("L", who, lease)
            assert granted == all(s[0] == who for s in live)
            if granted:
                for s in live:  # a renewal replaces the holder's previous lease
                    s[2] = now
                segments.append([who, now, now + lease + 1])
        elif op < 0.75:
            mine = [s for s in live if s[0] == who]
            try:
                locks.release("L", who)
                assert mine
                for s in mine:
                    s[2] = now
            except NotHolder:
                assert not mine
        else:
            clock.advance(rng.randrange(1, 5))
    for a, b in itertools.combinations(segments, 2):
        if a[0] != b[0]:
            assert a[2] <= b[1] or b[2] <= a[1], (a, b)


def _scheduler_fires(cadence, horizon, restarts, data_dir):
    clock = ManualClock()
    fires = []
    store = DataStore("sched", data_dir, clock)
    sched = PersistentScheduler(store, clock)
    sched.register("job", fires.append, cadence)
    for stop_at in sorted(restarts) + [horizon]:
        clock.advance_to(stop_at)
        sched.stop()
        sched = PersistentScheduler(DataStore("sched", data_dir, clock), clock)
        sched.register("job", fires.append, cadence)
    sched.stop()
    return fires


@criterion(8, "lock safety over 10000 interleavings and scheduler fire count across restart")
def test_locks_and_scheduler():
    rng = random.Random(8)
    for _ in range(10_000):
        _lock_interleaving(rng)
    cases = 0
    for cadence in (1, 3, 7, 10):
        for horizon in (0, 9, 10, 35, 101):
            for restarts in ([], [horizon // 2], [1, horizon // 3, horizon - 1]):
                restarts = [r for r in restarts if 0 <= r <= horizon]
                with tempfile.TemporaryDirectory() as tmp:
                    fires = _scheduler_fires(cadence, horizon, restarts, tmp)
                assert len(fires) == horizon // cadence, (cadence, horizon, restarts, fires)
                assert fires == [cadence * k for k in range(1, horizon // cadence + 1)]
                cases += 1
    return f"10000 interleavings, {cases} scheduler cases"


# 9. Interceptor transparency and stats conservation

_SIMPLE_STEPS = [
    {"type": "encode", "scheme": "base64"},
    {"type": "encode", "scheme": "base16"},
    {"type": "compress"},
    {"type": "decompress"},
    {"type": "set-header", "header": "h", "value": "v"},
    {"type": "remove-header", "header": "h"},
    {"type": "replace", "pairs": {"a": "b"}},
    {"type": "sort", "delimiter": ","},
    {"type": "validate", "rules": [{"headerRequired": "h"}]},
    {"type": "cancel", "condition": 'header("kind") == "stop"'},
    {"type": "throw", "kind": "boom"},
    {"type": "variable", "variable": "v"},
    {"type": "metadata"},
]


def random_flow(rng, index):
    def steps(depth):
        out = []
        for _ in range(rng.randrange(1, 5)):
            roll = rng.random()
            if depth < 2 and roll < 0.12:
                out.append({"type": "multicast", "branches": [{"name": "a", "steps": steps(depth + 1)},
                                                              {"name": "b", "steps": steps(depth + 1)}]})
            elif depth < 2 and roll < 0.24:
                out.append({"type": "choice", "when": [{"name": "w", "condition": 'header("kind") == "x"',
                                                        "steps": steps(depth + 1)}], "otherwise": steps(depth + 1)})
            elif depth < 2 and roll < 0.32:
                out.append({"type": "loop", "condition": 'header("loop") == "go"', "maxIterations": 2,
                            "steps": steps(depth + 1)})
            else:
                out.append(dict(rng.choice(_SIMPLE_STEPS)))
        return out

    raw = {"name": f"flow-{index}", "steps": steps(0)}
    if rng.random() < 0.5:
        raw["onException"] = [{"selector": rng.choice(["*", "boom", "validation"]), "mode": rng.choice(["resume", "rethrow"]),
                               "steps": [{"type": "set-header", "name": "handled", "header": "handled", "value": "y"}]}]
    return build_flow(raw)


def _outputs(rt, doc, messages):
    out = []
    for msg in messages:
        try:
            ex = rt.submit(doc.name, msg)
            out.append(("ok", ex.message, ex.cancelled))
        except FlowError as err:
            out.append(("error", err.record.kind, err.record.raising_step))
        except MulticastFailed as err:
            out.append(("multicast", str(err)))
    return out


def _conserved(rt, admissions):
    for component in rt.stats.components():
        r = rt.stats.query(component)
        assert r.invocations == r.successes + r.failures + r.cancellations, component
    for name, count in admissions.items():
        assert rt.stats.query(name).invocations == count, name


@criterion(9, "interceptor transparency on 100 random flows and stats conservation")
def test_interceptor_transparency_and_conservation():
    rng = random.Random(99)
    plain_rt, watched_rt = Runtime(ManualClock(), seed=9), Runtime(ManualClock(), seed=9)
    seen = []
    admissions = {}
    for index in range(100):
        doc = random_flow(rng, index)
        plain_rt.register_flow(doc)
        watched_rt.register_flow(doc)
        for name in sorted(doc.step_names()):
            boundary = f"{doc.name}/{name}"
            watched_rt.intercept(boundary, seen.append)
            watched_rt.intercept(boundary, lambda m: m.with_body(b"tampered").with_header("h", "x"))
            watched_rt.intercept(boundary, lambda m: 1 / 0)
        bodies = [rng.choice([b"", b"a,c,b", b"abc", rng.randbytes(12)]) for _ in range(5)]
        headers = [{"kind": rng.choice(["x", "y", "stop"]), "h": "1", "loop": rng.choice(["go", "no"])} for _ in range(5)]
        msgs = [Message(f"{index}-{j:016x}", headers[j], bodies[j]) for j in range(5)]
        assert _outputs(plain_rt, doc, msgs) == _outputs(watched_rt, doc, msgs), doc.name
        admissions[doc.name] = len(msgs)
    _conserved(plain_rt, admissions)
    _conserved(watched_rt, admissions)
    assert seen and all(isinstance(m, Message) for m in seen)
    errors = len(watched_rt.audit.of_kind("interceptor-error"))
    assert errors == len(seen)
    return f"{len(seen)} intercepted messages, {errors} listener errors audited"
