"""Message translator family: mapping, encoding, marshalling, compression,
type conversion, sorting, find/replace and metadata extraction.

All functions are pure: they take a Message and return a new one.
"""

from __future__ import annotations

import base64
import binascii
import gzip
import hashlib
import re
import zlib
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from typing import Mapping, Sequence

from . import formats
from .core import Message
from .errors import (
    CorruptStream,
    InvalidUtf8,
    MalformedEncoding,
    NonNumericSegment,
    PathNotFound,
)

_MISSING = object()


@dataclass(frozen=True)
class MappingRule:
    source_path: str
    target_path: str
    transform: str = "copy"  # copy | uppercase | lowercase | constant
    value: str | None = None

    @classmethod
    def from_dict(cls, raw: Mapping) -> "MappingRule":
        transform = raw.get("transform", "copy")
        value = raw.get("value")
        if isinstance(transform, Mapping):  # {"constant": "x"}
            (transform, value), = transform.items()
        return cls(raw.get("source", ""), raw["target"], transform, value)


def _lookup(doc, path: str):
    node = doc
    for part in filter(None, path.split("/")):
        if isinstance(node, dict) and part in node:
            node = node[part]
        elif isinstance(node, list) and part.isdigit() and int(part) < len(node):
            node = node[int(part)]
        else:
            return _MISSING
    return node


def _assign(doc: dict, path: str, value) -> None:
    parts = [p for p in path.split("/") if p]
    if not parts:
        raise ValueError("target path must not be empty")
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValueError(f"target path {path!r} crosses a leaf")
    node[parts[-1]] = value


def map_message(msg: Message, rules: Sequence[MappingRule], on_missing: str = "fail") -> Message:
    """Build a new tree document from ``rules`` applied to the (JSON-like) body."""
    targets = [r.target_path for r in rules]
    if len(set(targets)) != len(targets):
        raise ValueError("target paths must be unique")
    source = formats.parse_json(msg.body) if msg.body.strip() else {}
    out: dict = {}
    for rule in rules:
        if rule.transform == "constant":
            _assign(out, rule.target_path, rule.value or "")
            continue
        value = _lookup(source, rule.source_path)
        if value is _MISSING:
            if on_missing == "skip":
                continue
            raise PathNotFound(f"source path {rule.source_path!r} not in document")
        if rule.transform in ("uppercase", "lowercase"):
            if not isinstance(value, str):
                raise ValueError(f"{rule.transform} needs a string leaf at {rule.source_path!r}")
            value = value.upper() if rule.transform == "uppercase" else value.lower()
        elif rule.transform != "copy":
            raise ValueError(f"unknown mapping transform {rule.transform!r}")
        _assign(out, rule.target_path, value)
    return msg.with_body(formats.render_json(out), **{"content-type": "application/json"})


def wrap(msg: Message, path: str) -> Message:
    """Place the textual body as the leaf at ``path`` of a new document."""
    try:
        text = msg.body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvalidUtf8(str(exc)) from None
    doc: dict = {}
    _assign(doc, path, text)
    return msg.with_body(formats.render_json(doc), **{"content-type": "application/json"})


def encode(msg: Message, scheme: str = "base64") -> Message:
    if scheme == "base64":
        body = base64.b64encode(msg.body)
    elif scheme == "base16":
        body = binascii.hexlify(msg.body)
    else:
        raise ValueError(f"unknown encoding scheme {scheme!r}")
    return msg.with_body(body, **{"content-transfer-encoding": scheme})


def decode(msg: Message, scheme: str = "base64") -> Message:
    try:
        if scheme == "base64":
            body = base64.b64decode(msg.body, validate=True)
        elif scheme == "base16":
            body = binascii.unhexlify(msg.body)
        else:
            raise ValueError(f"unknown encoding scheme {scheme!r}")
    except (binascii.Error, ValueError) as exc:
        if "unknown encoding" in str(exc):
            raise
        raise MalformedEncoding(f"{scheme}: {exc}") from None
    return msg.with_body(body).without_headers("content-transfer-encoding")


_CONTENT_TYPES = {"json": "application/json", "xml": "application/xml"}


def _format_name(name: str) -> str:
    aliases = {"json-like": "json", "xml-like": "xml"}
    name = aliases.get(name, name)
    if name not in formats.PARSERS:
        raise ValueError(f"unknown document format {name!r}")
    return name


def marshal(msg: Message, to: str = "xml") -> Message:
    """Render the JSON-like tree body into ``to``."""
    to = _format_name(to)
    doc = formats.parse_json(msg.body)
    return msg.with_body(formats.RENDERERS[to](doc), **{"content-type": _CONTENT_TYPES[to]})


def unmarshal(msg: Message, format: str = "xml") -> Message:
    """Parse a ``format`` body back into a JSON-like tree body."""
    format = _format_name(format)
    doc = formats.PARSERS[format](msg.body)
    return msg.with_body(formats.render_json(doc), **{"content-type": "application/json"})


def compress(msg: Message, algo: str = "gzip") -> Message:
    if algo != "gzip":
        raise ValueError(f"unknown compression {algo!r}")
    return msg.with_body(gzip.compress(msg.body, mtime=0), **{"content-encoding": "gzip"})


def decompress(msg: Message, algo: str = "gzip") -> Message:
    if algo != "gzip":
        raise ValueError(f"unknown compression {algo!r}")
    try:
        body = gzip.decompress(msg.body)
    except (OSError, EOFError, zlib.error) as exc:
        raise CorruptStream(str(exc)) from None
    return msg.with_body(body).without_headers("content-encoding")


def type_convert(msg: Message, target: str = "text-utf8") -> Message:
    if target == "text-utf8":
        try:
            msg.body.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvalidUtf8(f"invalid UTF-8 at byte {exc.start}") from None
    elif target != "bytes":
        raise ValueError(f"unknown conversion target {target!r}")
    return msg.with_header("content-type-class", target)


def _numeric(segment: str) -> Decimal:
    try:
        value = Decimal(segment.strip())
    except InvalidOperation:
        raise NonNumericSegment(f"{segment!r} is not a number") from None
    if not value.is_finite():
        raise NonNumericSegment(f"{segment!r} is not a number")
    return value


def content_sort(msg: Message, delimiter: str = ",", comparator: str = "lexicographic") -> Message:
    if not delimiter:
        raise ValueError("delimiter must be non-empty")
    if not msg.body:
        return msg
    try:
        segments = msg.body.decode("utf-8").split(delimiter)
    except UnicodeDecodeError as exc:
        raise InvalidUtf8(str(exc)) from None
    if comparator == "numeric":
        ordered = sorted(segments, key=_numeric)
    elif comparator == "lexicographic":
        ordered = sorted(segments)
    else:
        raise ValueError(f"unknown comparator {comparator!r}")
    return msg.with_body(delimiter.join(ordered).encode("utf-8"))


def find_replace(msg: Message, pattern: str | Mapping[str, str], replacement: str = "") -> Message:
    """Replace non-overlapping occurrences, scanning left to right.

    With a dictionary, the longest term wins where several match at the
    same position.
    """
    if isinstance(pattern, Mapping):
        if not pattern or any(not k for k in pattern):
            raise ValueError("dictionary terms must be non-empty")
        table = {k.encode("utf-8"): v.encode("utf-8") for k, v in pattern.items()}
        regex = re.compile(b"|".join(re.escape(k) for k in sorted(table, key=len, reverse=True)))
        body, count = regex.subn(lambda m: table[m.group()], msg.body)
    else:
        if not pattern:
            raise ValueError("pattern must be non-empty")
        needle = pattern.encode("utf-8")
        count = msg.body.count(needle)
        body = msg.body.replace(needle, replacement.encode("utf-8"))
    return msg.with_body(body, matches=str(count))


_MAGIC = (
    (b"%PDF", "application/pdf"),
    (b"\x89PNG", "image/png"),
    (b"\x1f\x8b", "application/gzip"),
)


def sniff_mime(data: bytes) -> str:
    for magic, mime in _MAGIC:
        if data.startswith(magic):
            return mime
    return "application/octet-stream"


def extract_metadata(msg: Message) -> Message:
    return msg.with_headers(
        {
            "meta.size": str(len(msg.body)),
            "meta.sha256": hashlib.sha256(msg.body).hexdigest(),
            "meta.mime": sniff_mime(msg.body),
        }
    )
