"""Declarative flow documents: parsing, validation, rendering and template
instantiation.

A flow file is one JSON object::

    {
      "name": "send-invoice",
      "parameters": {"endpoint": {"type": "string", "default": "face-sim"}},
      "steps": [{"type": "encode", "scheme": "base64"}, ...],
      "onException": [{"selector": "*", "mode": "resume", "steps": [...]}],
      "subprocesses": {"prepare": {"steps": [...], "onException": [...]}},
      "resources": {...}, "qos": {...}, "simulation": {...}
    }

Every step is ``{"type": ..., "name": ..., <config>}``. Loops nest their
body under ``steps``, multicasts under ``branches`` and choices under
``when``/``otherwise``. Any step may carry ``redelivery``. Unnamed steps get
``<type>-<n>`` names in document order.
"""

from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping

from .errors import ExpressionError, MissingBinding, ParseError, UnknownSubprocess, ValidationError
from .expr import Predicate
from .handling import ExceptionHandler, RedeliveryPolicy

PLACEHOLDER = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_.\-]*)\}")

# step type -> config keys that must be present
VOCABULARY: dict[str, tuple[str, ...]] = {
    # transform
    "map": ("rules",),
    "encode": (),
    "decode": (),
    "marshal": (),
    "unmarshal": (),
    "compress": (),
    "decompress": (),
    "convert": (),
    "sort": (),
    "replace": (),
    "metadata": (),
    "wrap": ("path",),
    "set-header": ("header", "value"),
    "remove-header": ("header",),
    # routing
    "multicast": (),
    "join": ("output",),
    "delegate": ("target",),
    "loop": ("condition", "maxIterations"),
    "choice": (),
    # security
    "encrypt": ("keyAlias",),
    "decrypt": ("keyAlias",),
    "sign": ("keyAlias",),
    "verify": ("trustAlias",),
    "authorize": ("roles",),
    "propagate": (),
    # exceptions
    "throw": ("kind",),
    "validate": ("rules",),
    # monitoring and storage
    "indicator": ("message",),
    "cancel": ("condition",),
    "publish": ("topic",),
    "persist": ("store",),
    "variable": ("variable",),
    # endpoints
    "call": ("endpoint",),
    "failover": ("endpoints",),
    # composition
    "subprocess": ("subprocess",),
}

_STRUCTURAL = ("type", "name", "steps", "branches", "when", "otherwise", "redelivery")
QOS_LEVELS = ("bestEffort", "atLeastOnce", "atMostOnce", "exactlyOnce", "exactlyOnceInOrder")


@dataclass
class Branch:
    name: str
    steps: list = field(default_factory=list)
    condition: str | None = None


@dataclass
class Step:
    type: str
    name: str
    config: dict = field(default_factory=dict)
    steps: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    redelivery: RedeliveryPolicy | None = None

    def walk(self) -> Iterator["Step"]:
        yield self
        for child in self.steps:
            yield from child.walk()
        for branch in self.branches:
            for child in branch.steps:
                yield from child.walk()


@dataclass
class Parameter:
    type: str = "string"
    default: object = None
    required: bool = True


@dataclass
class Subprocess:
    steps: list = field(default_factory=list)
    on_exception: list = field(default_factory=list)


@dataclass
class FlowDocument:
    name: str
    steps: list = field(default_factory=list)
    parameters: dict = field(default_factory=dict)
    on_exception: list = field(default_factory=list)
    subprocesses: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)  # resources, qos, simulation, ...

    def walk(self) -> Iterator[Step]:
        """Every step of the document: main line, handlers and subprocesses."""
        for step in self.steps:
            yield from step.walk()
        for handler in self.on_exception:
            for step in handler.steps:
                yield from step.walk()
        for sub in self.subprocesses.values():
            for step in sub.steps:
                yield from step.walk()
            for handler in sub.on_exception:
                for step in handler.steps:
                    yield from step.walk()

    def step_names(self) -> set[str]:
        return {s.name for s in self.walk()}

    @property
    def qos(self) -> dict | None:
        return self.extras.get("qos")

    @property
    def resources(self) -> dict:
        return self.extras.get("resources", {})


FlowDefinition = FlowDocument


# parsing


class _Builder:
    def __init__(self):
        self.counters: dict[str, int] = {}
        self.names: set[str] = set()

    def auto_name(self, type_: str) -> str:
        while True:
            n = self.counters.get(type_, 0)
            self.counters[type_] = n + 1
            name = f"{type_}-{n}"
            if name not in self.names:
                return name

    def steps(self, raw, location: str) -> list[Step]:
        if not isinstance(raw, list):
            raise ValidationError("invalid-structure", location, "steps must be a list")
        return [self.step(item, f"{location}/{i}") for i, item in enumerate(raw)]

    def step(self, raw, location: str) -> Step:
        if not isinstance(raw, dict) or not isinstance(raw.get("type"), str):
            raise ValidationError("invalid-structure", location, "a step is an object with a string 'type'")
        type_ = raw["type"]
        if type_ not in VOCABULARY and not (type_.startswith("custom:") and len(type_) > 7):
            raise ValidationError("unknown-step-type", location, type_)
        name = raw.get("name")
        if name is None:
            name = self.auto_name(type_)
        if not isinstance(name, str) or not name:
            raise ValidationError("invalid-structure", location, "step name must be a non-empty string")
        if name in self.names:
            raise ValidationError("duplicate-step-name", location, name)
        self.names.add(name)
        for key in VOCABULARY.get(type_, ()):
            if key not in raw:
                raise ValidationError("missing-config", location, f"{type_} needs {key!r}")
        step = Step(type_, name, {k: v for k, v in raw.items() if k not in _STRUCTURAL})
        if "redelivery" in raw:
            try:
                step.redelivery = RedeliveryPolicy.from_dict(raw["redelivery"])
            except (TypeError, ValueError, AttributeError) as exc:
                raise ValidationError("invalid-redelivery", location, str(exc)) from None
        if type_ == "loop":
            step.steps = self.steps(raw.get("steps", []), f"{location}/steps")
        elif type_ == "multicast":
            branches = raw.get("branches")
            if not isinstance(branches, list) or not branches:
                raise ValidationError("missing-config", location, "multicast needs at least one branch")
            seen = set()
            for i, b in enumerate(branches):
                bname = b.get("name", f"branch-{i}") if isinstance(b, dict) else None
                if bname is None or bname in seen:
                    raise ValidationError("duplicate-branch", f"{location}/branches/{i}", str(bname))
                seen.add(bname)
                step.branches.append(Branch(bname, self.steps(b.get("steps", []), f"{location}/branches/{i}/steps")))
        elif type_ == "choice":
            for i, w in enumerate(raw.get("when", [])):
                if not isinstance(w, dict) or "condition" not in w:
                    raise ValidationError("missing-config", f"{location}/when/{i}", "when needs a condition")
                step.branches.append(Branch(w.get("name", f"when-{i}"), self.steps(w.get("steps", []), f"{location}/when/{i}/steps"), w["condition"]))
            if "otherwise" in raw:
                step.branches.append(Branch("otherwise", self.steps(raw["otherwise"], f"{location}/otherwise")))
        return step

    def handlers(self, raw, location: str) -> list[ExceptionHandler]:
        if not isinstance(raw, list):
            raise ValidationError("invalid-structure", location, "onException must be a list")
        out = []
        for i, h in enumerate(raw):
            loc = f"{location}/{i}"
            if not isinstance(h, dict):
                raise ValidationError("invalid-structure", loc, "handler must be an object")
            mode = h.get("mode", "resume")
            if mode not in ("resume", "rethrow"):
                raise ValidationError("invalid-handler-mode", loc, str(mode))
            out.append(ExceptionHandler(h.get("selector", "*"), self.steps(h.get("steps", []), f"{loc}/steps"), mode))
        return out


def _reserve_names(node, names: set) -> None:
    """Collect explicit step names first so auto names never collide with them."""
    if isinstance(node, dict):
        if isinstance(node.get("type"), str) and isinstance(node.get("name"), str):
            names.add(node["name"])
        for value in node.values():
            _reserve_names(value, names)
    elif isinstance(node, list):
        for value in node:
            _reserve_names(value, names)


def build_flow(raw: Mapping, shared_subprocesses=(), validate: bool = True) -> FlowDocument:
    if not isinstance(raw, Mapping):
        raise ValidationError("invalid-structure", "/", "a flow document is an object")
    if not isinstance(raw.get("name"), str) or not raw["name"]:
        raise ValidationError("missing-config", "/", "flow needs a 'name'")
    reserved: set = set()
    _reserve_names(raw, reserved)
    builder = _Builder()
    builder.names = set()
    builder_reserved = reserved

    def auto_name(type_: str, _orig=builder.auto_name) -> str:
        while True:
            name = _orig(type_)
            if name not in builder_reserved:
                return name

    builder.auto_name = auto_name
    parameters = {}
    for pname, pspec in (raw.get("parameters") or {}).items():
        if isinstance(pspec, str):
            pspec = {"type": pspec}
        if pspec.get("type", "string") not in ("string", "number", "boolean"):
            raise ValidationError("invalid-parameter", f"/parameters/{pname}", str(pspec.get("type")))
        parameters[pname] = Parameter(pspec.get("type", "string"), pspec.get("default"), "default" not in pspec)
    doc = FlowDocument(
        name=raw["name"],
        parameters=parameters,
        steps=builder.steps(raw.get("steps", []), "/steps"),
        on_exception=builder.handlers(raw.get("onException", []), "/onException"),
        extras={k: copy.deepcopy(v) for k, v in raw.items()
                if k not in ("name", "parameters", "steps", "onException", "subprocesses")},
    )
    for sname, sraw in (raw.get("subprocesses") or {}).items():
        loc = f"/subprocesses/{sname}"
        if not isinstance(sraw, dict):
            raise ValidationError("invalid-structure", loc, "subprocess must be an object")
        doc.subprocesses[sname] = Subprocess(
            builder.steps(sraw.get("steps", []), f"{loc}/steps"),
            builder.handlers(sraw.get("onException", []), f"{loc}/onException"),
        )
    if validate:
        validate_flow(doc, shared_subprocesses)
    return doc


def parse_flow(text: str | bytes, shared_subprocesses=()) -> FlowDocument:
    """Parse and validate a flow document; raises ParseError or ValidationError."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    return build_flow(raw, shared_subprocesses)


# validation


def _placeholders(value) -> set[str]:
    found: set[str] = set()
    if isinstance(value, str):
        found.update(PLACEHOLDER.findall(value))
    elif isinstance(value, dict):
        for v in value.values():
            found |= _placeholders(v)
    elif isinstance(value, list):
        for v in value:
            found |= _placeholders(v)
    return found


def _subprocess_refs(steps) -> set[str]:
    refs = set()
    for step in steps:
        for s in step.walk():
            if s.type == "subprocess":
                refs.add(s.config["subprocess"])
    return refs


def validate_flow(doc: FlowDocument, shared_subprocesses=()) -> None:
    raw = render_dict(doc)
    declared = set(doc.parameters)
    unknown = _placeholders(raw) - declared
    if unknown:
        raise ValidationError("unknown-parameter", "/", ", ".join(sorted(unknown)))

    known_subs = set(doc.subprocesses) | set(shared_subprocesses)
    for step in doc.walk():
        loc = f"step {step.name}"
        if step.type == "subprocess" and not PLACEHOLDER.search(str(step.config["subprocess"])):
            if step.config["subprocess"] not in known_subs:
                raise ValidationError("unknown-subprocess", loc, str(step.config["subprocess"]))
        conditions = [b.condition for b in step.branches if b.condition is not None]
        if step.type in ("loop", "cancel"):
            conditions.append(step.config["condition"])
        for rule in step.config.get("rules", []) if step.type == "validate" else []:
            if isinstance(rule, dict) and "predicate" in rule:
                conditions.append(rule["predicate"])
        for cond in conditions:
            if isinstance(cond, str) and not PLACEHOLDER.search(cond):
                try:
                    Predicate(cond)
                except ExpressionError as exc:
                    raise ValidationError("invalid-expression", loc, str(exc)) from None
        if step.type == "loop":
            limit = step.config["maxIterations"]
            if not isinstance(limit, str) and (not isinstance(limit, int) or limit < 1):
                raise ValidationError("invalid-config", loc, "maxIterations must be a positive integer")
        qos = step.config.get("qos")
        if isinstance(qos, dict):
            _check_qos(qos, loc)

    if doc.qos is not None:
        _check_qos(doc.qos, "/qos")

    # subprocess reference graph must be acyclic
    graph = {name: _subprocess_refs(sub.steps) | _subprocess_refs(s for h in sub.on_exception for s in h.steps)
             for name, sub in doc.subprocesses.items()}
    state: dict[str, int] = {}

    def visit(node: str, path: list[str]) -> None:
        state[node] = 1
        for nxt in sorted(graph.get(node, ())):
            if state.get(nxt) == 1:
                raise ValidationError("cycle", f"/subprocesses/{node}", " -> ".join(path + [nxt]))
            if state.get(nxt) is None and nxt in graph:
                visit(nxt, path + [nxt])
        state[node] = 2

    for node in sorted(graph):
        if node not in state:
            visit(node, [node])


def _check_qos(qos: Mapping, loc: str) -> None:
    level = qos.get("level")
    if level not in QOS_LEVELS:
        raise ValidationError("invalid-qos", loc, f"unknown level {level!r}")
    if level == "exactlyOnceInOrder" and not qos.get("sequenceHeader"):
        raise ValidationError("qos-sequence-header", loc, "exactlyOnceInOrder needs sequenceHeader")


# rendering


def _render_steps(steps) -> list:
    return [render_step(s) for s in steps]


def render_step(step: Step) -> dict:
    out = {"type": step.type, "name": step.name}
    out.update(copy.deepcopy(step.config))
    if step.redelivery is not None:
        out["redelivery"] = step.redelivery.to_dict()
    if step.type == "loop":
        out["steps"] = _render_steps(step.steps)
    elif step.type == "multicast":
        out["branches"] = [{"name": b.name, "steps": _render_steps(b.steps)} for b in step.branches]
    elif step.type == "choice":
        out["when"] = [{"name": b.name, "condition": b.condition, "steps": _render_steps(b.steps)}
                       for b in step.branches if b.condition is not None]
        for b in step.branches:
            if b.condition is None:
                out["otherwise"] = _render_steps(b.steps)
    return out


def _render_handlers(handlers) -> list:
    return [{"selector": h.selector, "mode": h.mode, "steps": _render_steps(h.steps)} for h in handlers]


def render_dict(doc: FlowDocument) -> dict:
    out: dict = {"name": doc.name}
    if doc.parameters:
        out["parameters"] = {
            n: ({"type": p.type} if p.required else {"type": p.type, "default": p.default})
            for n, p in doc.parameters.items()
        }
    out["steps"] = _render_steps(doc.steps)
    if doc.on_exception:
        out["onException"] = _render_handlers(doc.on_exception)
    if doc.subprocesses:
        out["subprocesses"] = {
            n: {"steps": _render_steps(s.steps), "onException": _render_handlers(s.on_exception)}
            for n, s in doc.subprocesses.items()
        }
    out.update(copy.deepcopy(doc.extras))
    return out


def render_flow(doc: FlowDocument) -> str:
    return json.dumps(render_dict(doc), indent=2, ensure_ascii=False) + "\n"


# templates


def _coerce(value, ptype: str):
    if ptype == "number" and isinstance(value, str):
        return float(value) if "." in value else int(value)
    if ptype == "boolean" and isinstance(value, str):
        return value.lower() in ("1", "true", "yes")
    return value


def _substitute(node, values: Mapping[str, object]):
    if isinstance(node, str):
        whole = PLACEHOLDER.fullmatch(node)
        if whole:
            return values[whole.group(1)]
        return PLACEHOLDER.sub(lambda m: str(values[m.group(1)]), node)
    if isinstance(node, dict):
        return {k: _substitute(v, values) for k, v in node.items()}
    if isinstance(node, list):
        return [_substitute(v, values) for v in node]
    return node


def instantiate_template(template: FlowDocument, bindings: Mapping[str, object], shared_subprocesses=()) -> FlowDocument:
    """Replace every ``${p}`` with its binding (or default) and revalidate.

    A placeholder that is a whole string takes the parameter's typed value;
    an embedded one is substituted as text.
    """
    values = {}
    for name, param in template.parameters.items():
        if name in bindings:
            values[name] = _coerce(bindings[name], param.type)
        elif not param.required:
            values[name] = param.default
        else:
            raise MissingBinding(name)
    raw = render_dict(template)
    params = raw.pop("parameters", None)
    raw = _substitute(raw, values)
    if params is not None:
        raw["parameters"] = params
    return build_flow(raw, shared_subprocesses)


def resolve_subprocess(doc: FlowDocument, name: str, shared: Mapping[str, Subprocess] | None = None) -> Subprocess:
    if name in doc.subprocesses:
        return doc.subprocesses[name]
    if shared and name in shared:
        return shared[name]
    raise UnknownSubprocess(f"no subprocess {name!r} in {doc.name!r} or the shared registry")
