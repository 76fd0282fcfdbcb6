"""Y-periodic scalar coefficient expressions.

A tiny infix language for the entries of the conductivity tensor and for the
surface density::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | '+' unary | atom
    atom   := NUMBER | 'y1' | 'y2' | 'pi'
            | ('sin' | 'cos' | 'exp' | 'abs') '(' expr ')'
            | ('min' | 'max') '(' expr ',' expr ')'
            | '(' expr ')'

Evaluation is vectorised: coordinates may be scalars or numpy arrays.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

ArrayLike = Union[float, np.ndarray]

DIV_EPS = 1e-300

UNARY_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "abs": np.abs}
BINARY_FUNCS = {"min": np.minimum, "max": np.maximum}
IDENTIFIERS = {"y1", "y2", "pi"} | set(UNARY_FUNCS) | set(BINARY_FUNCS)


class ExprError(ValueError):
    """Base class for coefficient-expression failures."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown identifier {name!r} at offset {offset}")
        self.name = name
        self.offset = offset


class EvalError(ExprError):
    pass


# --------------------------------------------------------------------- AST


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str  # "y1" | "y2"


@dataclass(frozen=True)
class Pi:
    pass


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * /
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Expr = Union[Num, Var, Pi, Neg, BinOp, Call]


# ------------------------------------------------------------------ parser

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/(),]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, off = self.take()
        if val != value or kind != "op":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", off)

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, off = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", off)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.term())
        return e

    def term(self) -> Expr:
        e = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            e = BinOp(op, e, self.unary())
        return e

    def unary(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.atom()

    def atom(self) -> Expr:
        kind, val, off = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "ident":
            if val not in IDENTIFIERS:
                raise UnknownIdentifierError(val, off)
            if val in ("y1", "y2"):
                return Var(val)
            if val == "pi":
                return Pi()
            self.expect("(")
            args = [self.expr()]
            if val in BINARY_FUNCS:
                self.expect(",")
                args.append(self.expr())
            self.expect(")")
            return Call(val, tuple(args))
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", off)


def parse(text: str) -> Expr:
    """Parse ``text`` into an expression tree.

    Raises ExprSyntaxError (carrying the byte offset) or UnknownIdentifierError.
    """
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    return _Parser(text).parse()


def to_text(e: Expr) -> str:
    """Fully parenthesised text form; ``parse(to_text(e))`` evaluates identically."""
    if isinstance(e, Num):
        return repr(e.value) if e.value >= 0 else f"({e.value!r})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Pi):
        return "pi"
    if isinstance(e, Neg):
        return f"(-{to_text(e.operand)})"
    if isinstance(e, BinOp):
        return f"({to_text(e.left)} {e.op} {to_text(e.right)})"
    if isinstance(e, Call):
        return f"{e.func}({', '.join(to_text(a) for a in e.args)})"
    raise TypeError(f"not an expression: {e!r}")


# -------------------------------------------------------------- evaluation


def _ev(e: Expr, y1, y2):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        return y1 if e.name == "y1" else y2
    if isinstance(e, Pi):
        return math.pi
    if isinstance(e, Neg):
        return -_ev(e.operand, y1, y2)
    if isinstance(e, BinOp):
        a = _ev(e.left, y1, y2)
        b = _ev(e.right, y1, y2)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if np.any(np.abs(b) < DIV_EPS):
            raise EvalError("division by a value of magnitude < 1e-300")
        return a / b
    if isinstance(e, Call):
        args = [_ev(a, y1, y2) for a in e.args]
        if e.func in UNARY_FUNCS:
            return UNARY_FUNCS[e.func](args[0])
        return BINARY_FUNCS[e.func](args[0], args[1])
    raise TypeError(f"not an expression: {e!r}")


def evaluate(e: Expr, y1: ArrayLike, y2: ArrayLike) -> ArrayLike:
    """Evaluate at the point(s) ``(y1, y2)``; arrays broadcast."""
    scalar = np.isscalar(y1) and np.isscalar(y2)
    y1 = np.asarray(y1, dtype=float)
    y2 = np.asarray(y2, dtype=float)
    if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y2))):
        raise EvalError("non-finite coordinate")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.broadcast_to(np.asarray(_ev(e, y1, y2), dtype=float), np.broadcast(y1, y2).shape)
    if scalar:
        return float(out)
    return np.array(out)


def eval_periodicity_check(e: Expr, n_samples: int, tol: float) -> bool:
    if n_samples < 4:
        raise ValueError("n_samples must be >= 4")
    t = np.linspace(0.0, 1.0, n_samples)
    zero = np.zeros_like(t)
    one = np.ones_like(t)
    d1 = np.abs(evaluate(e, zero, t) - evaluate(e, one, t))
    d2 = np.abs(evaluate(e, t, zero) - evaluate(e, t, one))
    return bool(np.all(d1 <= tol) and np.all(d2 <= tol))


# ------------------------------------------------------- coefficient fields


class Field:
    """A parsed expression that remembers its source text."""

    def __init__(self, source: Union[str, float, Expr]):
        if isinstance(source, (int, float)):
            source = repr(float(source))
        if isinstance(source, str):
            self.source = source
            self.expr = parse(source)
        else:
            self.expr = source
            self.source = to_text(source)

    def __call__(self, y1: ArrayLike, y2: ArrayLike) -> ArrayLike:
        return evaluate(self.expr, y1, y2)

    def is_periodic(self, n_samples: int = 64, tol: float = 1e-12) -> bool:
        return eval_periodicity_check(self.expr, n_samples, tol)

    def scaled(self, c: float) -> "Field":
        return Field(BinOp("*", Num(float(c)), self.expr))

    def __repr__(self):
        return f"Field({self.source!r})"


@dataclass(frozen=True)
class CoefficientTensor:
    """Symmetric 2x2 tensor field; a21 is a12 by construction."""

    a11: Field
    a12: Field
    a22: Field

    @classmethod
    def from_strings(cls, a11, a12="0", a22=None) -> "CoefficientTensor":
        return cls(Field(a11), Field(a12), Field(a11 if a22 is None else a22))

    @classmethod
    def isotropic(cls, expr) -> "CoefficientTensor":
        return cls(Field(expr), Field("0"), Field(expr))

    def values(self, y1, y2):
        """Return (a11, a12, a22) arrays at the given points."""
        shape = np.broadcast(np.asarray(y1), np.asarray(y2)).shape
        return tuple(np.broadcast_to(f(y1, y2), shape) for f in (self.a11, self.a12, self.a22))

    def scaled(self, c: float) -> "CoefficientTensor":
        return CoefficientTensor(self.a11.scaled(c), self.a12.scaled(c), self.a22.scaled(c))

    def sources(self) -> dict:
        return {"a11": self.a11.source, "a12": self.a12.source, "a22": self.a22.source}

    def is_periodic(self, n_samples: int = 64, tol: float = 1e-12) -> bool:
        return all(f.is_periodic(n_samples, tol) for f in (self.a11, self.a12, self.a22))

    def min_eigenvalue(self, n: int = 64) -> float:
        """Smallest eigenvalue of the tensor over an n x n sample grid of [0,1]^2."""
        t = (np.arange(n) + 0.5) / n
        Y1, Y2 = np.meshgrid(t, t, indexing="ij")
        a11, a12, a22 = self.values(Y1, Y2)
        mean = 0.5 * (a11 + a22)
        rad = np.sqrt((0.5 * (a11 - a22)) ** 2 + a12**2)
        return float(np.min(mean - rad))

    def check_elliptic(self, n: int = 64, alpha_min: float = 1e-12) -> float:
        alpha = self.min_eigenvalue(n)
        if not alpha >= alpha_min:
            raise ExprError(f"coefficient tensor not elliptic: sampled min eigenvalue {alpha:g}")
        return alpha


@dataclass(frozen=True)
class DensityField:
    rho: Field
    surface_average_hint: Optional[float] = None

    def __call__(self, y1, y2):
        return self.rho(y1, y2)

    def scaled(self, c: float) -> "DensityField":
        return DensityField(self.rho.scaled(c))

    @property
    def source(self) -> str:
        return self.rho.source


# ----------------------------------------------------------------- presets


def tensor_preset(name: str) -> CoefficientTensor:
    if name == "identity":
        return CoefficientTensor.isotropic("1")
    if name == "smooth-checker":
        return CoefficientTensor.isotropic("2 + sin(2*pi*y1)*sin(2*pi*y2)")
    raise KeyError(f"unknown tensor preset {name!r}")


def density_preset(name: str, c: Optional[float] = None) -> DensityField:
    if name == "rho-one":
        return DensityField(Field("1"))
    if name == "rho-odd":
        return DensityField(Field("sin(2*pi*y1)"))
    if name == "rho-shifted":
        if c is None:
            raise ValueError("rho-shifted needs the shift c")
        return DensityField(Field(f"{float(c)!r} + sin(2*pi*y1)"))
    raise KeyError(f"unknown density preset {name!r}")


__all__ = [
    "BinOp", "Call", "CoefficientTensor", "DensityField", "EvalError", "Expr", "ExprError",
    "ExprSyntaxError", "Field", "Neg", "Num", "Pi", "UnknownIdentifierError", "Var",
    "density_preset", "eval_periodicity_check", "evaluate", "parse", "tensor_preset", "to_text",
]
