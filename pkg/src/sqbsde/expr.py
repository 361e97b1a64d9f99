"""A small arithmetic expression language for user-supplied coefficients.

Grammar: numeric literals, variables (t, x, x1..xd, or any bound name),
binary + - * / ^, unary -, the functions exp log sin cos sqrt abs max min,
and parentheses. Precedence: ^ above unary minus above * / above + -, with ^
right-associative. Constants pi and e are predefined bindings that callers
may override.

Parsing is precedence-climbing with single-token lookahead; every parse
failure raises ParseError carrying the byte offset and what was expected
versus found.
"""

from __future__ import annotations

import math
from typing import Dict, Union

import numpy as np

from .errors import InvalidArgument, NumericDomain, SqbsdeError

_FUNCTIONS = {
    "exp": (1, np.exp),
    "log": (1, np.log),
    "sin": (1, np.sin),
    "cos": (1, np.cos),
    "sqrt": (1, np.sqrt),
    "abs": (1, np.abs),
    "max": (2, np.maximum),
    "min": (2, np.minimum),
}

_DEFAULT_BINDINGS = {"pi": math.pi, "e": math.e}


class ParseError(SqbsdeError, ValueError):
    def __init__(self, offset: int, expected: str, found: str):
        self.offset = offset
        self.expected = expected
        self.found = found
        super().__init__(f"at offset {offset}: expected {expected}, found {found}")


class UnboundVariable(SqbsdeError, KeyError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unbound variable {name!r}")


# tokens: (kind, text, offset); kinds NUM IDENT OP LPAREN RPAREN COMMA END


def _tokenize(src: str):
    toks = []
    i, n = 0, len(src)
    while i < n:
        ch = src[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            while j < n and (src[j].isdigit() or src[j] == "."):
                j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            text = src[i:j]
            try:
                float(text)
            except ValueError:
                raise ParseError(i, "a number", repr(text)) from None
            toks.append(("NUM", text, i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            toks.append(("IDENT", src[i:j], i))
            i = j
            continue
        if ch in "+-*/^":
            toks.append(("OP", ch, i))
            i += 1
            continue
        if ch == "(":
            toks.append(("LPAREN", ch, i))
            i += 1
            continue
        if ch == ")":
            toks.append(("RPAREN", ch, i))
            i += 1
            continue
        if ch == ",":
            toks.append(("COMMA", ch, i))
            i += 1
            continue
        raise ParseError(i, "a token", repr(ch))
    toks.append(("END", "", n))
    return toks


_BP = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}
_UNARY_BP = 30


class _Parser:
    def __init__(self, src: str):
        self.src = src
        self.toks = _tokenize(src)
        self.pos = 0

    def peek(self):
        return self.toks[self.pos]

    def next(self):
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def expect(self, kind: str, what: str):
        t = self.next()
        if t[0] != kind:
            raise ParseError(t[2], what, t[1] or "end of input")
        return t

    def parse_expr(self, rbp: int = 0):
        node = self.nud()
        while True:
            kind, text, off = self.peek()
            if kind != "OP" or _BP[text] <= rbp:
                break
            self.next()
            if text == "^":
                right = self.parse_expr(_BP["^"] - 1)  # right-associative
            else:
                right = self.parse_expr(_BP[text])
            node = ("bin", text, node, right)
        return node

    def nud(self):
        kind, text, off = self.next()
        if kind == "NUM":
            return ("num", float(text))
        if kind == "IDENT":
            if self.peek()[0] == "LPAREN":
                if text not in _FUNCTIONS:
                    raise ParseError(off, "a known function", text)
                self.next()
                arity = _FUNCTIONS[text][0]
                args = [self.parse_expr(0)]
                while self.peek()[0] == "COMMA":
                    self.next()
                    args.append(self.parse_expr(0))
                self.expect("RPAREN", "')'")
                if len(args) != arity:
                    raise ParseError(
                        off, f"{arity} argument(s) to {text}", f"{len(args)}"
                    )
                return ("call", text, tuple(args))
            return ("var", text)
        if kind == "OP" and text == "-":
            return ("neg", self.parse_expr(_UNARY_BP))
        if kind == "LPAREN":
            node = self.parse_expr(0)
            self.expect("RPAREN", "')'")
            return node
        raise ParseError(off, "a number, name, '(', or unary '-'",
                         text or "end of input")


class Expr:
    """Immutable parsed expression. Equality is structural."""

    __slots__ = ("node", "source")

    def __init__(self, node, source: str = ""):
        self.node = node
        self.source = source

    def __eq__(self, other):
        return isinstance(other, Expr) and self.node == other.node

    def __hash__(self):
        return hash(self.node)

    def __repr__(self):
        return f"Expr({to_source(self.node)!r})"

    def variables(self):
        out = set()

        def walk(n):
            if n[0] == "var":
                out.add(n[1])
            elif n[0] == "neg":
                walk(n[1])
            elif n[0] == "bin":
                walk(n[2]); walk(n[3])
            elif n[0] == "call":
                for a in n[2]:
                    walk(a)

        walk(self.node)
        # pi and e are prebound constants, not free variables
        return out - set(_DEFAULT_BINDINGS)

    def __call__(self, **bindings):
        return eval(self, bindings)


def parse(source: str) -> Expr:
    """Parse source into an Expr; raises ParseError with position on failure."""
    p = _Parser(source)
    node = p.parse_expr(0)
    kind, text, off = p.peek()
    if kind != "END":
        raise ParseError(off, "end of input", text)
    return Expr(node, source)


def _check_finite(val, node):
    arr = np.asarray(val)
    if not np.all(np.isfinite(arr)):
        raise NumericDomain(
            f"non-finite value in sub-expression {to_source(node)!r}",
            where=to_source(node),
        )
    return val


def _eval_node(node, bindings):
    tag = node[0]
    if tag == "num":
        return node[1]
    if tag == "var":
        name = node[1]
        if name in bindings:
            return bindings[name]
        if name in _DEFAULT_BINDINGS:
            return _DEFAULT_BINDINGS[name]
        raise UnboundVariable(name)
    if tag == "neg":
        return -_eval_node(node[1], bindings)
    if tag == "bin":
        op = node[1]
        a = _eval_node(node[2], bindings)
        b = _eval_node(node[3], bindings)
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            if np.any(np.asarray(b) == 0):
                raise NumericDomain(
                    f"division by zero in {to_source(node)!r}",
                    where=to_source(node),
                )
            return a / b
        # op == "^"
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            r = np.power(np.asarray(a, dtype=float), b)
        return _check_finite(r if np.ndim(a) or np.ndim(b) else float(r), node)
    # tag == "call"
    name = node[1]
    args = [_eval_node(a, bindings) for a in node[2]]
    if name == "log" and np.any(np.asarray(args[0]) <= 0):
        raise NumericDomain(f"log of non-positive value in {to_source(node)!r}",
                            where=to_source(node))
    if name == "sqrt" and np.any(np.asarray(args[0]) < 0):
        raise NumericDomain(f"sqrt of negative value in {to_source(node)!r}",
                            where=to_source(node))
    with np.errstate(over="ignore"):
        r = _FUNCTIONS[name][1](*args)
    return _check_finite(r, node)


def eval(e: Union[Expr, str], bindings: Dict[str, object] = None):
    """Evaluate an Expr under the given variable bindings.

    Bindings may map names to floats or numpy arrays; arrays broadcast.
    """
    if isinstance(e, str):
        e = parse(e)
    if not isinstance(e, Expr):
        raise InvalidArgument(f"expected Expr or str, got {type(e).__name__}")
    b = dict(bindings or {})
    out = _eval_node(e.node, b)
    if np.ndim(out) == 0:
        return float(out)
    return np.asarray(out, dtype=float)


def to_source(node) -> str:
    """Render a node back to parseable text; parse(to_source(n)) == n."""
    if isinstance(node, Expr):
        return to_source(node.node)
    tag = node[0]
    if tag == "num":
        return repr(node[1])
    if tag == "var":
        return node[1]
    if tag == "neg":
        return f"(-{to_source(node[1])})"
    if tag == "bin":
        return f"({to_source(node[2])} {node[1]} {to_source(node[3])})"
    return f"{node[1]}({', '.join(to_source(a) for a in node[2])})"


def print_expr(e: Expr) -> str:
    return to_source(e)
