import pytest
from hypothesis import given, settings, strategies as st

from patternflow import ManualClock, Runtime
from patternflow.core import Exchange
from patternflow.errors import FlowError, FlowStopped, RetriesExhausted, UnknownFlow, UnknownStep, ValidationFailed
from patternflow.flow import build_flow
from patternflow.handling import (
    ExceptionHandler,
    RedeliveryPolicy,
    redeliver_on_exception,
    select_handler,
    throw_exception,
    validate_message,
)
from patternflow.reliability import EndpointSimulator


def flow(rt, name, steps, on_exception=(), subprocesses=None):
    raw = {"name": name, "steps": steps, "onException": list(on_exception)}
    if subprocesses:
        raw["subprocesses"] = subprocesses
    return rt.register_flow(build_flow(raw))


MARK = {"type": "set-header", "name": "mark", "header": "handled", "value": "yes"}


# throw and catch

def test_selective_handler_runs(rt, make):
    flow(rt, "f", [{"type": "throw", "name": "boom", "kind": "validation"}, {"type": "set-header", "name": "after", "header": "a", "value": "1"}],
         [{"selector": "validation", "steps": [MARK]}])
    ex = rt.run_flow("f", make(b""))
    assert ex.message.headers["handled"] == "yes" and "a" not in ex.message.headers
    assert ex.properties["exception.kind"] == "validation" and ex.properties["exception.step"] == "boom"
    assert [(h.step, h.outcome) for h in ex.history] == [("boom", "failed"), ("catch/mark", "ok")]


def test_unmatched_kind_escapes(rt, make):
    flow(rt, "f", [{"type": "throw", "kind": "x"}], [{"selector": "y", "steps": [MARK]}])
    with pytest.raises(FlowError) as err:
        rt.run_flow("f", make(b""))
    assert err.value.record.kind == "x"


def test_first_matching_handler_wins(rt, make):
    first = dict(MARK, name="m1", value="first")
    second = dict(MARK, name="m2", value="second")
    flow(rt, "f", [{"type": "throw", "kind": "net.timeout"}],
         [{"selector": "db.*", "steps": [dict(MARK, name="m0", value="db")]}, {"selector": "net.*", "steps": [first]}, {"selector": "*", "steps": [second]}])
    assert rt.run_flow("f", make(b"")).message.headers["handled"] == "first"
    hs = [ExceptionHandler("a"), ExceptionHandler("*"), ExceptionHandler("b")]
    assert select_handler(hs, "b") is hs[1] and select_handler([], "b") is None


def test_subprocess_throw_reaches_parent_handler(rt, make):
    flow(rt, "f", [{"type": "subprocess", "name": "inner", "subprocess": "s"}],
         [{"selector": "deep", "steps": [MARK]}],
         {"s": {"steps": [{"type": "throw", "name": "t", "kind": "deep"}], "onException": [{"selector": "other", "steps": []}]}})
    ex = rt.run_flow("f", make(b""))
    assert ex.message.headers["handled"] == "yes"
    assert [(h.step, h.outcome) for h in ex.history] == [("sub:s/t", "failed"), ("inner", "failed"), ("catch/mark", "ok")]


def test_rethrow_mode_runs_handler_then_escapes(rt, make):
    flow(rt, "f", [{"type": "throw", "kind": "k"}], [{"selector": "*", "mode": "rethrow", "steps": [MARK]}])
    with pytest.raises(FlowError) as err:
        rt.run_flow("f", make(b""))
    assert err.value.exchange.message.headers["handled"] == "yes"


def test_throw_exception_helper():
    with pytest.raises(Exception) as err:
        throw_exception("custom", "details")
    assert err.value.kind == "custom" and str(err.value) == "details"


KINDS = st.sampled_from(["throw", "validate", "call", "set-header", "decode"])


@settings(max_examples=60, deadline=None)
@given(st.lists(KINDS, min_size=1, max_size=6))
def test_handler_totality(kinds):
    rt = Runtime(ManualClock(), seed=1)
    rt.register_endpoint(EndpointSimulator("bad").script("error"))
    configs = {
        "throw": {"type": "throw", "kind": "anything"},
        "validate": {"type": "validate", "rules": [{"bodyNonEmpty": True}]},
        "call": {"type": "call", "endpoint": "bad"},
        "set-header": {"type": "set-header", "header": "h", "value": "v"},
        "decode": {"type": "decode", "scheme": "base64"},
    }
    flow(rt, "f", [configs[k] for k in kinds], [{"selector": "*", "steps": [MARK]}])
    ex = rt.run_flow("f", rt.create_message(b"!!not base64"))
    assert ex.exception is None


# validation

def test_validate_examples(make):
    with pytest.raises(ValidationFailed) as err:
        validate_message(Exchange(make(b"")), [{"bodyNonEmpty": True}])
    assert err.value.rule == "bodyNonEmpty"
    validate_message(Exchange(make(b"", {"dest": "x"})), [{"headerRequired": "dest"}])
    rule = [{"predicate": 'header("n") > "5"'}]
    validate_message(Exchange(make(b"", {"n": "7"})), rule)
    validate_message(Exchange(make(b"", {"n": "10"})), rule)  # numeric, not lexicographic
    with pytest.raises(ValidationFailed):
        validate_message(Exchange(make(b"", {"n": "3"})), rule)


@given(st.integers(-1000, 1000), st.integers(-1000, 1000))
def test_predicate_numeric_compare_oracle(n, bound):
    ex = Exchange(__import__("patternflow").create_message(b"", {"n": str(n)}))
    rules = [{"predicate": f'header("n") > "{bound}"'}]
    try:
        validate_message(ex, rules)
        passed = True
    except ValidationFailed:
        passed = False
    assert passed == (n > bound)


def test_validate_step_first_failing_rule(rt, make):
    flow(rt, "f", [{"type": "validate", "rules": [{"headerRequired": "a"}, {"headerRequired": "b"}]}])
    with pytest.raises(FlowError) as err:
        rt.run_flow("f", make(b"", {"a": "1"}))
    assert err.value.record.kind == "validation" and "headerRequired:b" in err.value.record.message


# redelivery

def test_redelivery_fail_fail_ok_timing(clock):
    calls = []
    script = iter([RuntimeError("1"), RuntimeError("2"), "done"])

    def step():
        calls.append(clock.now())
        item = next(script)
        if isinstance(item, Exception):
            raise item
        return item

    result, failures = redeliver_on_exception(step, RedeliveryPolicy(3, (4, 9)), clock)
    assert (result, failures) == ("done", 2)
    assert [b - a for a, b in zip(calls, calls[1:])] == [4, 9]


def test_redelivery_exhausted_and_first_try(clock):
    def fail():
        raise RuntimeError("nope")

    with pytest.raises(RetriesExhausted) as err:
        redeliver_on_exception(fail, RedeliveryPolicy(2, (3,)), clock)
    assert err.value.last.attempt_count == 2 and clock.now() == 3
    before = clock.now()
    assert redeliver_on_exception(lambda: 1, RedeliveryPolicy(5, (7,)), clock) == (1, 0)
    assert clock.now() == before
    assert RedeliveryPolicy(5, (1, 2)).delay(4) == 2
    for bad in ((0, ()), (2, (-1,))):
        with pytest.raises(ValueError):
            RedeliveryPolicy(*bad)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 8), st.integers(1, 6), st.lists(st.integers(0, 5), max_size=4))
def test_redelivery_count_law_in_flow(fails, max_attempts, delays):
    rt = Runtime(ManualClock(), seed=2)
    ep = EndpointSimulator("ep").script(*(["error"] * fails + ["ok"]))
    rt.register_endpoint(ep)
    flow(rt, "f", [{"type": "call", "name": "c", "endpoint": "ep", "redelivery": {"maxAttempts": max_attempts, "delays": delays}}])
    try:
        ex = rt.run_flow("f", rt.create_message(b"x"))
        succeeded, history = True, ex.history
    except FlowError as err:
        succeeded, history = False, err.exchange.history
        assert err.record.attempt_count == max_attempts
    assert succeeded == (fails < max_attempts)
    assert ep.received == min(1 + fails, max_attempts)
    failed_at = [h.timestamp for h in history if h.outcome == "failed"]
    assert len(failed_at) == min(fails, max_attempts)
    policy = RedeliveryPolicy(max_attempts, tuple(delays))
    expected_gaps = [policy.delay(i) + 1 for i in range(len(failed_at) - 1)]  # 1 tick endpoint latency is not slept
    assert all(b >= a for a, b in zip(failed_at, failed_at[1:]))
    assert [b - a for a, b in zip(failed_at, failed_at[1:])] == [g - 1 for g in expected_gaps]


def test_redelivery_restores_snapshot(rt, make):
    state = {"n": 0}

    def flaky(msg, ex, cfg):
        state["n"] += 1
        if state["n"] < 3:
            raise RuntimeError("transient")
        return msg.with_header("seen", msg.headers.get("seen", "") + "x")

    rt.register_processor("flaky", flaky)
    flow(rt, "f", [{"type": "custom:flaky", "name": "p", "redelivery": {"maxAttempts": 3, "delays": [1]}}])
    ex = rt.run_flow("f", make(b""))
    assert ex.message.headers["seen"] == "x" and ex.properties["redelivery.attempts"] == "2"


# control operations

def test_skip_step(rt, make):
    flow(rt, "f", [{"type": "encode", "name": "enc"}, {"type": "set-header", "name": "h", "header": "x", "value": "1"}])
    assert rt.run_flow("f", make(b"hi")).message.body == b"aGk="
    rt.control("skip", "f/enc")
    ex = rt.run_flow("f", make(b"hi"))
    assert ex.message.body == b"hi" and ex.history[0].outcome == "skipped"
    rt.control("unskip", "f/enc")
    assert rt.run_flow("f", make(b"hi")).message.body == b"aGk="
    with pytest.raises(UnknownStep):
        rt.control("skip", "f/nope")
    with pytest.raises(UnknownFlow):
        rt.control("pause", "ghost")


def test_pause_then_resume_counter_oracle(rt, make):
    flow(rt, "f", [{"type": "set-header", "header": "x", "value": "1"}])
    rt.pause("f")
    for i in range(3):
        assert rt.submit("f", make(str(i).encode())) is None
    assert rt.inbox("f").message_count == 3 and "f" not in rt.stats.components()
    rt.resume("f")
    assert rt.inbox("f").message_count == 0 and rt.stats.query("f").invocations == 3


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(["send", "pause", "resume"]), max_size=30))
def test_pause_conservation(ops):
    rt = Runtime(ManualClock(), seed=3)
    done = []
    rt.register_processor("track", lambda m, ex, cfg: done.append(m.id))
    flow(rt, "f", [{"type": "custom:track"}])
    sent = []
    for op in ops:
        if op == "send":
            m = rt.create_message(b"")
            sent.append(m.id)
            rt.submit("f", m)
        elif op == "pause":
            rt.pause("f")
        else:
            rt.resume("f")
        assert len(done) + rt.inbox("f").message_count == len(sent)
    rt.resume("f")
    assert done == sent  # nothing lost, nothing duplicated, FIFO kept


def test_stop_local_and_all(rt, make):
    flow(rt, "a", [])
    flow(rt, "b", [])
    rt.stop("a")
    with pytest.raises(FlowStopped):
        rt.submit("a", make(b""))
    rt.run_flow("b", make(b""))
    rt.control("start", "a")
    rt.run_flow("a", make(b""))
    rt.stop()
    for name in ("a", "b"):
        with pytest.raises(FlowStopped):
            rt.submit(name, make(b""))
    assert len(rt.audit.of_kind("config-change")) == 3
