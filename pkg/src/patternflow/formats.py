"""Tree documents and their JSON-like / XML-like text forms.

A tree document is a ``dict`` whose values are strings, nested dicts or
non-empty homogeneous lists. That is the subset both text forms can carry
without loss:

* string leaf      ``{"a": "1"}``          ``<a>1</a>``
* empty string     ``{"a": ""}``           ``<a></a>``
* nested map       ``{"a": {"b": "1"}}``   ``<a><b>1</b></a>``
* empty map        ``{"a": {}}``           ``<a/>``
* list             ``{"a": ["x", "y"]}``   ``<a><item>x</item><item>y</item></a>``

A single-key top-level map becomes the root element; any other top-level
map is wrapped in ``<root>``. Because of that the key ``item`` is reserved
inside maps and a lone top-level ``root`` key cannot hold a map.
"""

from __future__ import annotations

import json
import re

from .errors import ParseError, UnsupportedContent

_NAME = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*")
_ENTITIES = {"amp": "&", "lt": "<", "gt": ">", "quot": '"', "apos": "'"}


def check_tree(doc, path: str = "") -> None:
    """Raise UnsupportedContent if ``doc`` is outside the convertible subset."""
    if isinstance(doc, str):
        return
    if isinstance(doc, dict):
        for key, value in doc.items():
            if not isinstance(key, str) or not _NAME.fullmatch(key):
                raise UnsupportedContent(f"key {key!r} at {path or '/'} is not an element name", -1)
            if key == "item":
                raise UnsupportedContent(f"key 'item' at {path or '/'} is reserved for lists", -1)
            check_tree(value, f"{path}/{key}")
        return
    if isinstance(doc, list):
        if not doc:
            raise UnsupportedContent(f"empty list at {path}", -1)
        kinds = {type(v) for v in doc}
        if len(kinds) != 1:
            raise UnsupportedContent(f"heterogeneous list at {path}", -1)
        for i, value in enumerate(doc):
            check_tree(value, f"{path}[{i}]")
        return
    raise UnsupportedContent(f"unsupported value {doc!r} at {path or '/'}", -1)


def parse_json(text: str | bytes) -> dict:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("body is not UTF-8", exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.pos) from None
    if not isinstance(doc, dict):
        raise UnsupportedContent("top-level value must be an object", 0)
    check_tree(doc)
    return doc


def render_json(doc: dict) -> bytes:
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":")).encode("utf-8")


# XML-like


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _render_element(name: str, value, out: list[str]) -> None:
    if isinstance(value, str):
        out.append(f"<{name}>{_escape(value)}</{name}>")
    elif isinstance(value, dict):
        if not value:
            out.append(f"<{name}/>")
            return
        out.append(f"<{name}>")
        for key, child in value.items():
            _render_element(key, child, out)
        out.append(f"</{name}>")
    else:
        out.append(f"<{name}>")
        for child in value:
            _render_element("item", child, out)
        out.append(f"</{name}>")


def render_xml(doc: dict) -> bytes:
    check_tree(doc)
    out: list[str] = []
    if len(doc) == 1:
        (name, value), = doc.items()
        if name == "root" and isinstance(value, dict):
            raise UnsupportedContent("a lone 'root' key cannot hold a map", -1)
        _render_element(name, value, out)
    else:
        _render_element("root", doc, out)
    return "".join(out).encode("utf-8")


class _XmlParser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def error(self, message: str, pos: int | None = None, cls=ParseError):
        return cls(message, self.pos if pos is None else pos)

    def skip_ws(self) -> None:
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def parse(self) -> tuple[str, object]:
        self.skip_ws()
        if self.text.startswith("<?xml", self.pos):
            end = self.text.find("?>", self.pos)
            if end < 0:
                raise self.error("unterminated declaration")
            self.pos = end + 2
            self.skip_ws()
        name, value = self.element()
        self.skip_ws()
        if self.pos != len(self.text):
            raise self.error("content after root element")
        return name, value

    def name(self) -> str:
        m = _NAME.match(self.text, self.pos)
        if not m:
            raise self.error("expected element name")
        self.pos = m.end()
        return m.group()

    def element(self) -> tuple[str, object]:
        if not self.text.startswith("<", self.pos):
            raise self.error("expected '<'")
        if self.text.startswith("<!", self.pos) or self.text.startswith("<?", self.pos):
            raise self.error("comments, CDATA and processing instructions are not supported", cls=UnsupportedContent)
        self.pos += 1
        name = self.name()
        self.skip_ws()
        if self.text.startswith("/>", self.pos):
            self.pos += 2
            return name, {}
        if not self.text.startswith(">", self.pos):
            if _NAME.match(self.text, self.pos):
                raise self.error("attributes are not supported", cls=UnsupportedContent)
            raise self.error("expected '>'")
        self.pos += 1
        text_parts: list[str] = []
        text_start = self.pos
        children: list[tuple[str, object]] = []
        text_seen = False
        while True:
            if self.pos >= len(self.text):
                raise self.error(f"unterminated element <{name}>")
            ch = self.text[self.pos]
            if self.text.startswith("</", self.pos):
                close_at = self.pos
                self.pos += 2
                closing = self.name()
                if closing != name:
                    raise self.error(f"mismatched </{closing}> for <{name}>", close_at)
                self.skip_ws()
                if not self.text.startswith(">", self.pos):
                    raise self.error("expected '>'")
                self.pos += 1
                break
            if ch == "<":
                if text_seen:
                    raise self.error("mixed content is not supported", cls=UnsupportedContent)
                children.append(self.element())
                continue
            if ch == "&":
                text_parts.append(self.entity())
            else:
                text_parts.append(ch)
                self.pos += 1
            if not ch.isspace():
                if children:
                    raise self.error("mixed content is not supported", cls=UnsupportedContent)
                text_seen = True
        if not children:
            return name, "".join(text_parts)
        names = [child for child, _ in children]
        if all(n == "item" for n in names):
            return name, [value for _, value in children]
        if "item" in names:
            raise ParseError(f"<item> mixed with named children in <{name}>", text_start)
        if len(set(names)) != len(names):
            raise ParseError(f"repeated child element in <{name}>", text_start)
        return name, dict(children)

    def entity(self) -> str:
        end = self.text.find(";", self.pos)
        if end < 0:
            raise self.error("unterminated entity")
        ref = self.text[self.pos + 1 : end]
        start = self.pos
        self.pos = end + 1
        if ref.startswith("#x"):
            return chr(int(ref[2:], 16))
        if ref.startswith("#"):
            return chr(int(ref[1:]))
        if ref in _ENTITIES:
            return _ENTITIES[ref]
        raise ParseError(f"unknown entity &{ref};", start)


def parse_xml(text: str | bytes) -> dict:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("body is not UTF-8", exc.start) from None
    name, value = _XmlParser(text).parse()
    if name == "root" and isinstance(value, dict):
        doc = value
    else:
        doc = {name: value}
    check_tree(doc)
    return doc


PARSERS = {"json": parse_json, "xml": parse_xml}
RENDERERS = {"json": render_json, "xml": render_xml}
