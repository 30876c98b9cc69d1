import json

import pytest
from hypothesis import given, settings, strategies as st

from patternflow import ManualClock, Runtime, fixture_path
from patternflow.errors import FlowError, MissingBinding, ParseError, UnknownSubprocess, ValidationError
from patternflow.flow import (
    PLACEHOLDER,
    build_flow,
    instantiate_template,
    parse_flow,
    render_dict,
    render_flow,
    resolve_subprocess,
)


def rule(text):
    with pytest.raises(ValidationError) as err:
        parse_flow(text)
    return err.value.rule


# parsing and validation

def test_parse_examples():
    doc = parse_flow('{"name": "m", "steps": []}')
    assert doc.name == "m" and list(doc.walk()) == []
    assert rule('{"name": "c", "steps": [], "subprocesses": {"A": {"steps": [{"type": "subprocess", "subprocess": "A"}]}}}') == "cycle"
    assert rule('{"name": "e", "steps": [{"type": "encrypt"}]}') == "missing-config"


def test_parse_error_position():
    with pytest.raises(ParseError) as err:
        parse_flow('{"name": "x", "steps": [}')
    assert err.value.position == 24


@pytest.mark.parametrize("doc, expected", [
    ({"name": "x", "steps": [{"type": "teleport"}]}, "unknown-step-type"),
    ({"name": "x", "steps": [{"type": "encode", "name": "a"}, {"type": "decode", "name": "a"}]}, "duplicate-step-name"),
    ({"name": "x", "steps": [{"type": "call", "endpoint": "${ep}"}]}, "unknown-parameter"),
    ({"name": "x", "steps": [{"type": "subprocess", "subprocess": "ghost"}]}, "unknown-subprocess"),
    ({"name": "x", "steps": [{"type": "cancel", "condition": "header(("}]}, "invalid-expression"),
    ({"name": "x", "steps": [{"type": "loop", "condition": "true", "maxIterations": 0, "steps": []}]}, "invalid-config"),
    ({"name": "x", "steps": [], "qos": {"level": "exactlyOnceInOrder"}}, "qos-sequence-header"),
    ({"name": "x", "steps": [], "qos": {"level": "mostly"}}, "invalid-qos"),
    ({"name": "x", "steps": [{"type": "encode", "redelivery": {"maxAttempts": 0}}]}, "invalid-redelivery"),
    ({"name": "x", "steps": [], "onException": [{"selector": "*", "mode": "ignore", "steps": []}]}, "invalid-handler-mode"),
    ({"name": "x", "steps": {}}, "invalid-structure"),
    ({"name": "x", "steps": [], "subprocesses": {
        "A": {"steps": [{"type": "subprocess", "name": "a", "subprocess": "B"}]},
        "B": {"steps": [{"type": "subprocess", "name": "b", "subprocess": "A"}]}}}, "cycle"),
])
def test_validation_rules(doc, expected):
    assert rule(json.dumps(doc)) == expected


def test_auto_names_skip_explicit():
    doc = build_flow({"name": "x", "steps": [{"type": "encode"}, {"type": "encode", "name": "encode-2"}, {"type": "encode"}]})
    assert [s.name for s in doc.steps] == ["encode-0", "encode-2", "encode-1"]


# round trip

SIMPLE = st.sampled_from([
    {"type": "encode", "scheme": "base64"},
    {"type": "decode", "scheme": "hex"},
    {"type": "compress"},
    {"type": "set-header", "header": "h", "value": "v"},
    {"type": "remove-header", "header": "h"},
    {"type": "throw", "kind": "k", "message": "m"},
    {"type": "cancel", "condition": 'header("x") == "y"'},
    {"type": "call", "endpoint": "e", "timeout": 3},
    {"type": "validate", "rules": [{"bodyNonEmpty": True}, {"headerRequired": "a"}]},
])


def steps_strategy(depth=2):
    leaf = st.builds(lambda s, r: dict(s, redelivery=r) if r else dict(s), SIMPLE,
                     st.one_of(st.none(), st.builds(lambda n, d: {"maxAttempts": n, "delays": d}, st.integers(1, 4), st.lists(st.integers(0, 9), max_size=3))))
    if depth == 0:
        return st.lists(leaf, max_size=3)
    inner = steps_strategy(depth - 1)
    nested = st.one_of(
        st.builds(lambda b: {"type": "loop", "condition": "false", "maxIterations": 3, "steps": b}, inner),
        st.builds(lambda a, b: {"type": "multicast", "branches": [{"name": "a", "steps": a}, {"name": "b", "steps": b}]}, inner, inner),
        st.builds(lambda a, b: {"type": "choice", "when": [{"name": "w", "condition": "true", "steps": a}], "otherwise": b}, inner, inner),
    )
    return st.lists(st.one_of(leaf, nested), max_size=4)


DOCS = st.builds(
    lambda steps, handler, sub: {
        "name": "gen", "steps": steps,
        "onException": [{"selector": "*", "mode": "resume", "steps": handler}],
        "subprocesses": {"s": {"steps": sub, "onException": []}},
    },
    steps_strategy(), steps_strategy(0), steps_strategy(1),
)


@settings(max_examples=150, deadline=None)
@given(DOCS)
def test_parse_render_round_trip(raw):
    doc = build_flow(raw)
    again = parse_flow(render_flow(doc))
    assert again == doc
    assert render_flow(again) == render_flow(doc)


def test_fixture_round_trip():
    doc = parse_flow(fixture_path("edocument.json").read_text())
    assert parse_flow(render_flow(doc)) == doc


# templates

def tree_diff(a, b, path=""):
    """Leaf paths where two trees differ; raises if their shapes differ."""
    if isinstance(a, dict):
        assert isinstance(b, dict) and a.keys() == b.keys(), path
        return [p for k in a for p in tree_diff(a[k], b[k], f"{path}/{k}")]
    if isinstance(a, list):
        assert isinstance(b, list) and len(a) == len(b), path
        return [p for i, (x, y) in enumerate(zip(a, b)) for p in tree_diff(x, y, f"{path}/{i}")]
    return [] if a == b else [path]


def placeholder_sites(node, path=""):
    if isinstance(node, dict):
        return [p for k, v in node.items() for p in placeholder_sites(v, f"{path}/{k}")]
    if isinstance(node, list):
        return [p for i, v in enumerate(node) for p in placeholder_sites(v, f"{path}/{i}")]
    return [path] if isinstance(node, str) and PLACEHOLDER.search(node) else []


TEMPLATE = {
    "name": "tpl",
    "parameters": {"endpoint": {"type": "string"}, "timeout": {"type": "number", "default": 5},
                   "alias": {"type": "string", "default": "k"}},
    "steps": [
        {"type": "set-header", "name": "tag", "header": "target", "value": "to-${endpoint}"},
        {"type": "sign", "name": "s", "keyAlias": "${alias}"},
        {"type": "call", "name": "c", "endpoint": "${endpoint}", "timeout": "${timeout}"},
    ],
}


def test_template_examples():
    tpl = build_flow(TEMPLATE)
    inst = instantiate_template(tpl, {"endpoint": "face-sim"})
    call = inst.steps[2]
    assert call.config == {"endpoint": "face-sim", "timeout": 5}
    assert inst.steps[0].config["value"] == "to-face-sim"
    with pytest.raises(MissingBinding):
        instantiate_template(tpl, {})
    assert instantiate_template(tpl, {"endpoint": "x", "timeout": "12"}).steps[2].config["timeout"] == 12


@given(st.text("abcxyz-", min_size=1, max_size=8), st.text("abcxyz-", min_size=1, max_size=8), st.integers(1, 99))
def test_template_purity(ep1, ep2, timeout):
    tpl = build_flow(TEMPLATE)
    a = render_dict(instantiate_template(tpl, {"endpoint": ep1}))
    b = render_dict(instantiate_template(tpl, {"endpoint": ep2, "timeout": timeout}))
    base = render_dict(tpl)
    sites = set(placeholder_sites(base))
    assert set(tree_diff(base, a)) <= sites
    assert set(tree_diff(a, b)) <= sites
    assert placeholder_sites(a) == [] or all(s.startswith("/parameters") for s in placeholder_sites(a))


def test_template_revalidated():
    tpl = build_flow({"name": "t", "parameters": {"n": {"type": "number"}},
                      "steps": [{"type": "loop", "condition": "true", "maxIterations": "${n}", "steps": []}]})
    with pytest.raises(ValidationError) as err:
        instantiate_template(tpl, {"n": "0"})
    assert err.value.rule == "invalid-config"


# subprocesses

PURE = st.sampled_from([
    {"type": "encode", "scheme": "base64"},
    {"type": "encode", "scheme": "hex"},
    {"type": "compress"},
    {"type": "set-header", "header": "h", "value": "v"},
    {"type": "set-header", "header": "g", "value": "w"},
    {"type": "remove-header", "header": "h"},
    {"type": "replace", "pairs": {"a": "b"}},
])


@settings(max_examples=80, deadline=None)
@given(st.lists(PURE, max_size=6), st.lists(PURE, max_size=3), st.binary(max_size=40))
def test_subprocess_transparency(inner, outer, body):
    rt = Runtime(ManualClock(), seed=5)
    inline = build_flow({"name": "inline", "steps": outer + inner + outer})
    wrapped = build_flow({"name": "wrapped", "steps": outer + [{"type": "subprocess", "subprocess": "p"}] + outer,
                          "subprocesses": {"p": {"steps": inner}}})
    msg = rt.create_message(body, {"h": "0"})
    try:
        expected = rt.run_flow(inline, msg).message
    except FlowError as err:
        with pytest.raises(FlowError) as again:
            rt.run_flow(wrapped, msg)
        assert again.value.record.kind == err.record.kind
        return
    assert rt.run_flow(wrapped, msg).message == expected


def test_subprocess_history_prefix_and_local_handler(rt, make):
    rt.register_flow(build_flow({"name": "f", "steps": [{"type": "subprocess", "name": "call-p", "subprocess": "p"}],
                                 "onException": [{"selector": "*", "steps": [{"type": "set-header", "name": "parent", "header": "p", "value": "1"}]}],
                                 "subprocesses": {"p": {"steps": [{"type": "encode", "name": "a"}, {"type": "throw", "name": "t", "kind": "oops"}],
                                                        "onException": [{"selector": "oops", "steps": [{"type": "set-header", "name": "local", "header": "l", "value": "1"}]}]}}}))
    ex = rt.run_flow("f", make(b"x"))
    assert [h.step for h in ex.history] == ["sub:p/a", "sub:p/t", "sub:p/catch/local", "call-p"]
    assert ex.message.headers.get("l") == "1" and "p" not in ex.message.headers


def test_shared_subprocess(rt, make):
    rt.register_subprocess("common", build_flow({"name": "tmp", "steps": [{"type": "encode", "name": "enc"}]}).steps)
    for name in ("one", "two"):
        rt.register_flow(json.dumps({"name": name, "steps": [{"type": "subprocess", "name": "use", "subprocess": "common"}]}))
    histories = [[h.step for h in rt.run_flow(n, make(b"hi")).history] for n in ("one", "two")]
    assert histories == [["sub:common/enc", "use"]] * 2
    with pytest.raises(ValidationError):
        parse_flow('{"name": "z", "steps": [{"type": "subprocess", "subprocess": "common"}]}')
    with pytest.raises(UnknownSubprocess):
        resolve_subprocess(build_flow({"name": "q", "steps": []}), "nope", rt.shared_subprocesses)
