"""Parametric waveform expressions: parser, printer, symbolic d/dt, sampling.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := NUMBER | IDENT | call | '(' expr ')' | '-' factor
    call   := IDENT '(' [IDENT '=' expr (',' IDENT '=' expr)*] ')'

The identifier ``t`` is the time variable; every other bare identifier is a
named parameter bound at sampling time.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

from .waveform import (
    DEFAULT_LENGTH,
    DEFAULT_SAMPLE_RATE,
    KIND_PARAMS,
    Waveform,
    WaveKind,
    WaveformError,
    evaluate_kind,
    resolve_params,
)

TIME_NAME = "t"


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, column: int):
        super().__init__(f"column {column}: {message}")
        self.column = column


class UnboundParameter(ExprError):
    def __init__(self, name: str):
        super().__init__(f"unbound parameter {name!r}")
        self.name = name


class UnsupportedDerivative(ExprError):
    def __init__(self, node: "Expr"):
        super().__init__(f"no symbolic derivative for {to_text(node)}")
        self.node = node


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Time:
    pass


@dataclass(frozen=True)
class Param:
    name: str


@dataclass(frozen=True)
class Sum:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Difference:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Product:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Quotient:
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Scale:
    factor: float
    operand: "Expr"


@dataclass(frozen=True)
class Call:
    kind: WaveKind
    args: tuple[tuple[str, "Expr"], ...]

    def arg(self, name: str) -> "Expr | None":
        for key, value in self.args:
            if key == name:
                return value
        return None


Expr = Union[Const, Time, Param, Sum, Difference, Product, Quotient, Scale, Call]
WaveExpr = Expr

# ---------------------------------------------------------------- parsing

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/(),=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num, ident, op, end
    text: str
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos + 1)
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), pos + 1))
        pos = m.end()
    toks.append(_Tok("end", "", len(text) + 1))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _fail(self, what: str):
        tok = self.tok
        found = "end of input" if tok.kind == "end" else repr(tok.text)
        raise ExprSyntaxError(f"expected {what}, found {found}", tok.col)

    def _accept(self, text: str) -> bool:
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return True
        return False

    def _expect(self, text: str) -> None:
        if not self._accept(text):
            self._fail(repr(text))

    def parse(self) -> Expr:
        node = self.expr()
        if self.tok.kind != "end":
            self._fail("operator or end of input")
        return node

    def expr(self) -> Expr:
        node = self.term()
        while True:
            if self._accept("+"):
                node = Sum(node, self.term())
            elif self._accept("-"):
                node = Difference(node, self.term())
            else:
                return node

    def term(self) -> Expr:
        node = self.factor()
        while True:
            if self._accept("*"):
                node = Product(node, self.factor())
            elif self._accept("/"):
                node = Quotient(node, self.factor())
            else:
                return node

    def factor(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Const(float(tok.text))
        if tok.kind == "ident":
            self.i += 1
            if self.tok.kind == "op" and self.tok.text == "(":
                return self.call(tok)
            return Time() if tok.text == TIME_NAME else Param(tok.text)
        if self._accept("("):
            node = self.expr()
            self._expect(")")
            return node
        if self._accept("-"):
            return Scale(-1.0, self.factor())
        self._fail("number, identifier, '(' or '-'")

    def call(self, name: _Tok) -> Call:
        try:
            kind = WaveKind(name.text)
        except ValueError:
            raise ExprSyntaxError(f"unknown primitive {name.text!r}", name.col) from None
        self._expect("(")
        args: list[tuple[str, Expr]] = []
        if not self._accept(")"):
            while True:
                key = self.tok
                if key.kind != "ident":
                    self._fail("argument name")
                self.i += 1
                if any(k == key.text for k, _ in args):
                    raise ExprSyntaxError(f"duplicate argument {key.text!r}", key.col)
                self._expect("=")
                args.append((key.text, self.expr()))
                if self._accept(")"):
                    break
                if not self._accept(","):
                    self._fail("',' or ')'")
        return Call(kind, tuple(args))


def parse_expr(text: str) -> Expr:
    return _Parser(text).parse()


# ---------------------------------------------------------------- printing

_PREC = {Sum: 1, Difference: 1, Product: 2, Quotient: 2, Scale: 3}
_SYMBOL = {Sum: "+", Difference: "-", Product: "*", Quotient: "/"}


def _prec(node: Expr) -> int:
    if isinstance(node, Scale) and node.factor != -1.0:
        return 2  # printed as k*x
    if isinstance(node, Const) and node.value < 0:
        return 3  # printed as unary minus
    return _PREC.get(type(node), 4)


def _num(x: float) -> str:
    if not math.isfinite(x):
        raise ExprError(f"cannot print non-finite constant {x}")
    return repr(float(x))


def to_text(node: Expr) -> str:
    """Print ``node`` so that ``parse_expr(to_text(e)) == e`` for parseable trees.

    Negative constants print as ``-x`` and re-parse as ``Scale(-1, x)``;
    a ``Scale`` with a factor other than -1 prints as a product.
    """
    if isinstance(node, Const):
        return _num(node.value) if node.value >= 0 else f"-{_num(-node.value)}"
    if isinstance(node, Time):
        return TIME_NAME
    if isinstance(node, Param):
        return node.name
    if isinstance(node, Call):
        inner = ", ".join(f"{k}={to_text(v)}" for k, v in node.args)
        return f"{node.kind.value}({inner})"
    if isinstance(node, Scale):
        if node.factor == -1.0:
            return "-" + _wrap(node.operand, 3)
        return f"{_num(node.factor)}*{_wrap(node.operand, 3)}"
    p = _PREC[type(node)]
    left = _wrap(node.left, p)
    right = _wrap(node.right, p + 1)
    return f"{left} {_SYMBOL[type(node)]} {right}"


def _wrap(node: Expr, min_prec: int) -> str:
    text = to_text(node)
    if _prec(node) < min_prec:
        return f"({text})"
    return text


# ---------------------------------------------------------------- evaluation


def free_parameters(node: Expr) -> set[str]:
    if isinstance(node, Param):
        return {node.name}
    if isinstance(node, Call):
        return set().union(*(free_parameters(v) for _, v in node.args))
    if isinstance(node, Scale):
        return free_parameters(node.operand)
    if isinstance(node, (Sum, Difference, Product, Quotient)):
        return free_parameters(node.left) | free_parameters(node.right)
    return set()


def depends_on_time(node: Expr) -> bool:
    if isinstance(node, Time):
        return True
    if isinstance(node, Call):
        return True
    if isinstance(node, Scale):
        return depends_on_time(node.operand)
    if isinstance(node, (Sum, Difference, Product, Quotient)):
        return depends_on_time(node.left) or depends_on_time(node.right)
    return False


def _call_params(node: Call, bindings: Mapping[str, float]) -> dict[str, float]:
    params = {}
    for key, value in node.args:
        if depends_on_time(value):
            raise ExprError(f"{node.kind.value}: argument {key!r} must not depend on t")
        params[key] = float(evaluate(value, None, bindings))
    try:
        return resolve_params(node.kind, params)
    except WaveformError as exc:
        raise ExprError(str(exc)) from None


def evaluate(node: Expr, t, bindings: Mapping[str, float]):
    """Evaluate at times ``t`` (array, or None for time-independent nodes)."""
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Param):
        try:
            return float(bindings[node.name])
        except KeyError:
            raise UnboundParameter(node.name) from None
    if isinstance(node, Time):
        if t is None:
            raise ExprError("t is not available here")
        return t
    if isinstance(node, Call):
        params = _call_params(node, bindings)
        try:
            return evaluate_kind(node.kind, params, t)
        except WaveformError as exc:
            raise ExprError(str(exc)) from None
    if isinstance(node, Scale):
        return node.factor * evaluate(node.operand, t, bindings)
    left = evaluate(node.left, t, bindings)
    right = evaluate(node.right, t, bindings)
    if isinstance(node, Sum):
        return np.add(left, right)
    if isinstance(node, Difference):
        return np.subtract(left, right)
    if isinstance(node, Product):
        return np.multiply(left, right)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.divide(left, right)


def sample_expr(
    node: Expr,
    bindings: Mapping[str, float] | None = None,
    length: int = DEFAULT_LENGTH,
    sample_rate: float = DEFAULT_SAMPLE_RATE,
    t0: float = 0.0,
) -> Waveform:
    bindings = {} if bindings is None else bindings
    missing = sorted(free_parameters(node) - set(bindings))
    if missing:
        raise UnboundParameter(missing[0])
    if length < 1:
        raise ExprError("length must be at least 1")
    t = t0 + np.arange(length) / sample_rate
    values = np.broadcast_to(np.asarray(evaluate(node, t, bindings), dtype=np.float64), t.shape)
    return Waveform(np.array(values), sample_rate, t0)


# ---------------------------------------------------------------- d/dt

ZERO = Const(0.0)
ONE = Const(1.0)


def _is_const(node: Expr, value: float) -> bool:
    return isinstance(node, Const) and node.value == value


def _add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Sum(a, b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return Scale(-1.0, b)
    return Difference(a, b)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Product(a, b)


def _arg(node: Call, name: str) -> Expr:
    value = node.arg(name)
    if value is not None:
        return value
    default = KIND_PARAMS[node.kind].optional.get(name)
    if default is None:
        raise ExprError(f"{node.kind.value}: missing parameter {name!r}")
    return Const(default)


def _d_call(node: Call) -> Expr:
    for key, value in node.args:
        if depends_on_time(value):
            raise UnsupportedDerivative(node)
    kind = node.kind
    if kind is WaveKind.DC:
        return ZERO
    if kind is WaveKind.SINE:
        # a sin(wt + phi)' = a w sin(wt + phi + pi/2)
        a, f, phi = _arg(node, "a"), _arg(node, "f"), _arg(node, "phi")
        amp = _mul(_mul(a, Const(2 * math.pi)), f)
        return Call(kind, (("a", amp), ("f", f), ("phi", Sum(phi, Const(math.pi / 2)))))
    if kind is WaveKind.GAUSSIAN:
        mu, sigma = _arg(node, "mu"), _arg(node, "sigma")
        return Product(Quotient(Difference(mu, Time()), Product(sigma, sigma)), node)
    if kind is WaveKind.SLOPE:
        a, t0, width = _arg(node, "a"), _arg(node, "t0"), _arg(node, "T")
        return Call(
            WaveKind.RECTANGLE,
            (("a", Quotient(a, width)), ("t1", t0), ("t2", Sum(t0, width))),
        )
    raise UnsupportedDerivative(node)


def differentiate_expr(node: Expr) -> Expr:
    """Symbolic d/dt.  Rectangle, trapezoid, triangle and flattop calls are rejected."""
    if isinstance(node, (Const, Param)):
        return ZERO
    if isinstance(node, Time):
        return ONE
    if isinstance(node, Call):
        return _d_call(node)
    if isinstance(node, Scale):
        inner = differentiate_expr(node.operand)
        return ZERO if _is_const(inner, 0.0) else Scale(node.factor, inner)
    da = differentiate_expr(node.left)
    db = differentiate_expr(node.right)
    if isinstance(node, Sum):
        return _add(da, db)
    if isinstance(node, Difference):
        return _sub(da, db)
    if isinstance(node, Product):
        return _add(_mul(da, node.right), _mul(node.left, db))
    # quotient rule
    num = _sub(_mul(da, node.right), _mul(node.left, db))
    if _is_const(num, 0.0):
        return ZERO
    return Quotient(num, Product(node.right, node.right))
