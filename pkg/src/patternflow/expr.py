"""A small predicate language for conditions in flows.

Grammar::

    expr    := and ('||' and)*
    and     := unary ('&&' unary)*
    unary   := '!' unary | compare
    compare := operand (('=='|'!='|'<'|'<='|'>'|'>=') operand)?
    operand := STRING | NUMBER | 'true' | 'false' | CALL | '(' expr ')'
    CALL    := ('header'|'property'|'var'|'has') '(' STRING ')' | 'body' '(' ')'

Comparison is numeric when both sides parse as decimal numbers and
lexicographic otherwise. A missing header or property only satisfies ``!=``.

>>> Predicate('header("n") > "5"').evaluate_values(headers={"n": "7"})
True
"""

from __future__ import annotations

import re
from decimal import Decimal, InvalidOperation
from typing import Any, Mapping

from .errors import ExpressionError

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<string>"(?:[^"\\]|\\.)*")
      | (?P<number>-?\d+(?:\.\d+)?)
      | (?P<op>==|!=|<=|>=|&&|\|\||[<>!()])
      | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
    )""",
    re.VERBOSE,
)

_FUNCS = {"header", "property", "var", "has", "body"}
_MISSING = object()


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            raise ExpressionError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        value = m.group(kind)
        start = m.start(kind)
        if kind == "string":
            value = re.sub(r"\\(.)", r"\1", value[1:-1])
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None, value=None):
        tok = self.tokens[self.i]
        if kind and tok[0] != kind or value and tok[1] != value:
            expected = value or kind
            raise ExpressionError(f"expected {expected}, got {tok[1]!r}", tok[2])
        self.i += 1
        return tok

    def parse(self):
        node = self.or_()
        self.take("end")
        return node

    def or_(self):
        node = self.and_()
        while self.peek()[1] == "||":
            self.take()
            node = ("or", node, self.and_())
        return node

    def and_(self):
        node = self.unary()
        while self.peek()[1] == "&&":
            self.take()
            node = ("and", node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "!" and self.peek()[0] == "op":
            self.take()
            return ("not", self.unary())
        return self.compare()

    def compare(self):
        left = self.operand()
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("==", "!=", "<", "<=", ">", ">="):
            self.take()
            return ("cmp", tok[1], left, self.operand())
        return left

    def operand(self):
        kind, value, pos = self.take()
        if kind == "string":
            return ("lit", value)
        if kind == "number":
            return ("lit", value)
        if kind == "op" and value == "(":
            node = self.or_()
            self.take("op", ")")
            return node
        if kind == "name":
            if value in ("true", "false"):
                return ("lit", value == "true")
            if value not in _FUNCS:
                raise ExpressionError(f"unknown function {value!r}", pos)
            self.take("op", "(")
            if value == "body":
                self.take("op", ")")
                return ("call", "body", None)
            arg = self.take("string")[1]
            self.take("op", ")")
            return ("call", value, arg)
        raise ExpressionError(f"unexpected token {value!r}", pos)


def _number(value):
    if isinstance(value, bool) or value is None or value is _MISSING:
        return None
    try:
        return Decimal(str(value))
    except InvalidOperation:
        return None


def _compare(op: str, left, right) -> bool:
    if left is _MISSING or right is _MISSING:
        return op == "!="
    ln, rn = _number(left), _number(right)
    if ln is not None and rn is not None and not ln.is_nan() and not rn.is_nan():
        left, right = ln, rn
    elif isinstance(left, bool) or isinstance(right, bool):
        if op not in ("==", "!="):
            return False
        return (left == right) == (op == "==")
    else:
        left, right = str(left), str(right)
    return {
        "==": left == right,
        "!=": left != right,
        "<": left < right,
        "<=": left <= right,
        ">": left > right,
        ">=": left >= right,
    }[op]


def _truthy(value) -> bool:
    if value is _MISSING or value is None:
        return False
    if isinstance(value, bool):
        return value
    return value != ""


class Predicate:
    """Compiled condition. Compilation errors surface at construction."""

    def __init__(self, source: str):
        self.source = source
        self._tree = _Parser(source).parse()

    def __repr__(self) -> str:
        return f"Predicate({self.source!r})"

    def evaluate(self, exchange) -> bool:
        variables = exchange.variables.as_dict() if getattr(exchange, "variables", None) else {}
        return self.evaluate_values(
            headers=exchange.message.headers,
            properties=exchange.properties,
            body=exchange.message.body,
            variables=variables,
        )

    def evaluate_values(
        self,
        headers: Mapping[str, str] | None = None,
        properties: Mapping[str, str] | None = None,
        body: bytes = b"",
        variables: Mapping[str, str] | None = None,
    ) -> bool:
        env = {
            "header": headers or {},
            "property": properties or {},
            "var": variables or {},
            "body": body,
        }
        return _truthy(self._eval(self._tree, env))

    def _eval(self, node, env) -> Any:
        op = node[0]
        if op == "lit":
            return node[1]
        if op == "call":
            name, arg = node[1], node[2]
            if name == "body":
                return env["body"].decode("utf-8", errors="replace")
            if name == "has":
                return arg in env["header"]
            return env[name].get(arg, _MISSING)
        if op == "not":
            return not _truthy(self._eval(node[1], env))
        if op == "and":
            return _truthy(self._eval(node[1], env)) and _truthy(self._eval(node[2], env))
        if op == "or":
            return _truthy(self._eval(node[1], env)) or _truthy(self._eval(node[2], env))
        if op == "cmp":
            return _compare(node[1], self._eval(node[2], env), self._eval(node[3], env))
        raise AssertionError(op)
