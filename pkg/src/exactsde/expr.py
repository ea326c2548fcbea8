"""A small expression language for inline coefficient specs.

Grammar (``^`` is right-associative and binds tighter than unary minus)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('+' | '-') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Names are state symbols, the time symbol ``t`` and the constants ``pi`` and
``e``; functions are ``sqrt log exp sin cos``. Trees evaluate on numpy
arrays and can be differentiated symbolically.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Sequence, Union

import numpy as np

from .errors import ConfigError

FUNCTIONS = {"sqrt": np.sqrt, "log": np.log, "exp": np.exp, "sin": np.sin, "cos": np.cos}
CONSTANTS = {"pi": math.pi, "e": math.e}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


class ParseError(ConfigError):
    def __init__(self, message, pos=None):
        super().__init__(message if pos is None else f"{message} at position {pos}")
        self.pos = pos


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Bin:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    fn: str
    arg: "Node"


Node = Union[Num, Var, Neg, Bin, Call]


def tokenize(text: str) -> list:
    out, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = len(text) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[bad]!r}", bad)
        kind = m.lastgroup
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text: str, symbols: Sequence[str]):
        self.toks = tokenize(text)
        self.i = 0
        self.symbols = set(symbols)

    def peek(self):
        return self.toks[self.i]

    def take(self, value=None):
        tok = self.toks[self.i]
        if value is not None and tok[1] != value:
            raise ParseError(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise ParseError(f"unexpected {tok[1]!r}", tok[2])
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Bin(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Bin(op, node, self.unary())
        return node

    def unary(self) -> Node:
        tok = self.peek()
        if tok[0] == "op" and tok[1] in ("+", "-"):
            self.take()
            arg = self.unary()
            return Neg(arg) if tok[1] == "-" else arg
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            self.take()
            return Bin("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in FUNCTIONS:
                self.take("(")
                arg = self.expr()
                self.take(")")
                return Call(text, arg)
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                raise ParseError(f"unknown function {text!r}", pos)
            if text in CONSTANTS:
                return Num(CONSTANTS[text])
            if text in self.symbols:
                return Var(text)
            raise ParseError(f"unknown symbol {text!r}", pos)
        if text == "(":
            node = self.expr()
            self.take(")")
            return node
        raise ParseError(f"unexpected {text or 'end of input'!r}", pos)


def parse(text: str, symbols: Sequence[str] = ("t",)) -> Node:
    """Parse ``text``; names outside ``symbols``, constants and functions are rejected."""
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression")
    return _Parser(text, symbols).parse()


def evaluate(node: Node, env: Dict[str, object]):
    """Numeric value with numpy broadcasting over the arrays in ``env``."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, Neg):
        return -evaluate(node.arg, env)
    if isinstance(node, Call):
        return FUNCTIONS[node.fn](evaluate(node.arg, env))
    a, b = evaluate(node.left, env), evaluate(node.right, env)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        return a / b
    return np.power(a, b)


def free_symbols(node: Node) -> set:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, (Neg, Call)):
        return free_symbols(node.arg)
    return free_symbols(node.left) | free_symbols(node.right)


# -- symbolic differentiation with light constant folding ---------------------

ZERO, ONE = Num(0.0), Num(1.0)


def _add(a, b):
    if a == ZERO:
        return b
    if b == ZERO:
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return Bin("+", a, b)


def _sub(a, b):
    if b == ZERO:
        return a
    if a == ZERO:
        return _neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return Bin("-", a, b)


def _mul(a, b):
    if a == ZERO or b == ZERO:
        return ZERO
    if a == ONE:
        return b
    if b == ONE:
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return Bin("*", a, b)


def _div(a, b):
    if a == ZERO:
        return ZERO
    if b == ONE:
        return a
    return Bin("/", a, b)


def _neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def diff(node: Node, var: str) -> Node:
    """Symbolic derivative ``d node / d var``."""
    if isinstance(node, Num):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.name == var else ZERO
    if isinstance(node, Neg):
        return _neg(diff(node.arg, var))
    if isinstance(node, Call):
        u, du = node.arg, diff(node.arg, var)
        if du == ZERO:
            return ZERO
        outer = {
            "sqrt": lambda: _div(ONE, _mul(Num(2.0), Call("sqrt", u))),
            "log": lambda: _div(ONE, u),
            "exp": lambda: Call("exp", u),
            "sin": lambda: Call("cos", u),
            "cos": lambda: _neg(Call("sin", u)),
        }[node.fn]()
        return _mul(outer, du)
    a, b = node.left, node.right
    da, db = diff(a, var), diff(b, var)
    if node.op == "+":
        return _add(da, db)
    if node.op == "-":
        return _sub(da, db)
    if node.op == "*":
        return _add(_mul(da, b), _mul(a, db))
    if node.op == "/":
        return _div(_sub(_mul(da, b), _mul(a, db)), Bin("^", b, Num(2.0)))
    # power: constant exponent keeps the result defined for negative bases
    if db == ZERO:
        if da == ZERO:
            return ZERO
        return _mul(_mul(b, Bin("^", a, _sub(b, ONE))), da)
    return _mul(node, _add(_mul(db, Call("log", a)), _div(_mul(b, da), a)))


def to_text(node: Node) -> str:
    """Fully parenthesized source that parses back to the same tree."""
    if isinstance(node, Num):
        return repr(node.value) if node.value >= 0 else f"({node.value!r})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, Call):
        return f"{node.fn}({to_text(node.arg)})"
    return f"({to_text(node.left)} {node.op} {to_text(node.right)})"


# -- coefficient fields -------------------------------------------------------


@dataclass(frozen=True)
class ExprField:
    """Array of expressions over state symbols and ``t`` as a batched field.

    ``field(x, t)`` maps ``(..., p)`` to ``(..., *shape)``; ``jac`` appends a
    trailing state index and ``dt`` differentiates in time.
    """

    nodes: tuple
    shape: tuple
    state: tuple
    time: str = "t"

    @classmethod
    def from_strings(cls, texts, shape, state, time="t") -> "ExprField":
        flat = list(np.asarray(texts, dtype=object).ravel())
        if int(np.prod(shape)) != len(flat):
            raise ConfigError(f"expected {int(np.prod(shape))} expressions for shape {shape}, got {len(flat)}")
        symbols = tuple(state) + (time,)
        return cls(tuple(parse(str(s), symbols) for s in flat), tuple(shape), tuple(state), time)

    def _env(self, x, t):
        x = np.asarray(x, dtype=float)
        env = {name: x[..., i] for i, name in enumerate(self.state)}
        env[self.time] = float(t) if np.ndim(t) == 0 else np.asarray(t, dtype=float)
        return env, x.shape[:-1]

    def _eval(self, nodes, x, t, shape):
        env, lead = self._env(x, t)
        out = np.empty(lead + (len(nodes),))
        for k, node in enumerate(nodes):
            out[..., k] = evaluate(node, env)
        return out.reshape(lead + shape)

    def __call__(self, x, t):
        return self._eval(self.nodes, x, t, self.shape)

    @cached_property
    def _jac_nodes(self):
        return [diff(n, v) for n in self.nodes for v in self.state]

    @cached_property
    def _dt_nodes(self):
        return [diff(n, self.time) for n in self.nodes]

    def jac(self, x, t):
        return self._eval(self._jac_nodes, x, t, self.shape + (len(self.state),))

    def dt(self, x, t):
        return self._eval(self._dt_nodes, x, t, self.shape)

    @property
    def time_dependent(self) -> bool:
        return any(self.time in free_symbols(n) for n in self.nodes)


def split_matrix(text: str) -> list:
    """``"a, b; c, d"`` to ``[["a", "b"], ["c", "d"]]``; commas inside calls are not expected."""
    rows = [r for r in (s.strip() for s in text.split(";")) if r]
    return [[c.strip() for c in row.split(",")] for row in rows]
