"""Arithmetic formulas for derived metrics.

Grammar (whitespace insignificant)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' unary)?          # right associative
    atom    := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

Functions: log, exp, sin, sqrt. Evaluation works on floats and on numpy
arrays of any shape, so a derived metric can be computed for a whole panel
in one call.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import FormulaDomainError, FormulaSyntaxError, UnboundNameError

FUNCTIONS = ("log", "exp", "sin", "sqrt")

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()]))"
)


class Expr:
    def evaluate(self, bindings):
        raise NotImplementedError

    def to_text(self) -> str:
        raise NotImplementedError

    def names(self) -> set[str]:
        raise NotImplementedError

    def __str__(self):
        return self.to_text()


@dataclass(frozen=True)
class Num(Expr):
    value: float

    def evaluate(self, bindings):
        return self.value

    def to_text(self):
        return repr(float(self.value))

    def names(self):
        return set()


@dataclass(frozen=True)
class Name(Expr):
    id: str

    def evaluate(self, bindings):
        try:
            return bindings[self.id]
        except KeyError:
            raise UnboundNameError(self.id) from None

    def to_text(self):
        return self.id

    def names(self):
        return {self.id}


@dataclass(frozen=True)
class Neg(Expr):
    operand: Expr

    def evaluate(self, bindings):
        return -self.operand.evaluate(bindings)

    def to_text(self):
        return f"(-{self.operand.to_text()})"

    def names(self):
        return self.operand.names()


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def evaluate(self, bindings):
        a = self.left.evaluate(bindings)
        b = self.right.evaluate(bindings)
        with np.errstate(all="ignore"):
            if self.op == "+":
                out = np.add(a, b)
            elif self.op == "-":
                out = np.subtract(a, b)
            elif self.op == "*":
                out = np.multiply(a, b)
            elif self.op == "/":
                zero = np.asarray(b) == 0
                if zero.any():
                    _raise_at(zero, f"division by zero in {self.to_text()}")
                out = np.true_divide(a, b)
            else:
                out = np.power(np.asarray(a, dtype=float), b)
        _check_finite(out, self)
        return out

    def to_text(self):
        return f"({self.left.to_text()} {self.op} {self.right.to_text()})"

    def names(self):
        return self.left.names() | self.right.names()


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    arg: Expr

    def evaluate(self, bindings):
        x = self.arg.evaluate(bindings)
        arr = np.asarray(x, dtype=float)
        if self.fn == "log":
            bad = arr <= 0
            if bad.any():
                _raise_at(bad, f"log of non-positive value in {self.to_text()}")
        elif self.fn == "sqrt":
            bad = arr < 0
            if bad.any():
                _raise_at(bad, f"sqrt of negative value in {self.to_text()}")
        with np.errstate(all="ignore"):
            out = getattr(np, self.fn)(arr)
        _check_finite(out, self)
        return out

    def to_text(self):
        return f"{self.fn}({self.arg.to_text()})"

    def names(self):
        return self.arg.names()


def _raise_at(mask, message):
    mask = np.asarray(mask)
    err = FormulaDomainError(message)
    err.index = None if mask.ndim == 0 else tuple(int(i) for i in np.argwhere(mask)[0])
    raise err


def _check_finite(value, node):
    bad = ~np.isfinite(value)
    if np.any(bad):
        _raise_at(bad, f"non-finite result in {node.to_text()}")


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = self._tokenize(text)
        self.i = 0

    @staticmethod
    def _tokenize(text):
        tokens = []
        pos = 0
        stripped = text.rstrip()
        while pos < len(stripped):
            m = _TOKEN.match(stripped, pos)
            if m is None or m.end() == pos:
                bad = pos + len(stripped[pos:]) - len(stripped[pos:].lstrip())
                raise FormulaSyntaxError(f"unexpected character {stripped[bad]!r}", bad)
            kind = m.lastgroup
            tokens.append((kind, m.group(kind), m.start(kind)))
            pos = m.end()
        tokens.append(("end", "", len(stripped)))
        return tokens

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind != "op":
            raise FormulaSyntaxError(f"expected {value!r}, got {text or 'end of input'!r}", pos)

    def parse(self):
        if self.peek()[0] == "end":
            raise FormulaSyntaxError("empty formula", 0)
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise FormulaSyntaxError(f"unexpected token {text!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.take()
            return Neg(self.unary())
        return self.power()

    def power(self):
        base = self.atom()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if text not in FUNCTIONS:
                    raise FormulaSyntaxError(f"unknown function {text!r}", pos)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(text, arg)
            if text in FUNCTIONS:
                raise FormulaSyntaxError(f"function {text!r} needs an argument", pos)
            return Name(text)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        raise FormulaSyntaxError(f"unexpected {text or 'end of input'!r}", pos)


def parse_formula(text: str) -> Expr:
    return _Parser(text).parse()


def evaluate_formula(expr, bindings):
    """Evaluate ``expr`` (text or parsed) against a name -> value mapping.

    Scalars in give a float out; array bindings broadcast.
    """
    if isinstance(expr, str):
        expr = parse_formula(expr)
    out = expr.evaluate(bindings)
    if np.ndim(out) == 0:
        return float(out)
    return np.asarray(out, dtype=float)
