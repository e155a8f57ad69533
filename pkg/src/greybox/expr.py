"""Symbolic expression trees for model equations.

Provides parsing of infix formula text, numeric evaluation, exact symbolic
differentiation, structural simplification and free-variable analysis.
Expression nodes are frozen dataclasses: immutable, hashable, and compared
structurally, so values may be shared freely across threads.

Grammar (precedence from loosest to tightest: ``+ -``, then ``* /``, then
unary minus, then right-associative ``^``)::

    expr   := term (('+'|'-') term)*
    term   := factor (('*'|'/') factor)*
    factor := '-' factor | power
    power  := base ('^' factor)?
    base   := NUMBER | IDENT | IDENT '(' expr ')' | '(' expr ')'

Numbers are decimal or scientific notation.  Recognized functions:
exp, log, sqrt, sin, cos, tan, atan.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Union

__all__ = [
    "Expression",
    "Const",
    "Var",
    "Neg",
    "BinOp",
    "Call",
    "ExprError",
    "ExprSyntaxError",
    "EvaluationError",
    "parse",
    "evaluate",
    "differentiate",
    "free_variables",
    "simplify",
    "to_string",
    "python_source",
    "is_structural_zero",
    "FUNCTIONS",
]

FUNCTIONS = {
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "atan": math.atan,
}


class ExprError(ValueError):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    """Parse failure, carrying the position of the offending token."""

    def __init__(self, message: str, line: int, column: int, token: str):
        super().__init__(f"line {line}, column {column}: {message} (at {token!r})")
        self.line = line
        self.column = column
        self.token = token


class EvaluationError(ExprError):
    """Numeric evaluation failure (unbound variable or domain error)."""


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    arg: "Expression"


@dataclass(frozen=True)
class BinOp:
    op: str  # one of + - * / ^
    left: "Expression"
    right: "Expression"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Expression"


Expression = Union[Const, Var, Neg, BinOp, Call]

_ZERO = Const(0.0)
_ONE = Const(1.0)


# ---------------------------------------------------------------------------
# tokenizer / parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()])"
    r")"
)


def _tokenize(text: str, line: int):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            # skip trailing whitespace before declaring an error
            rest = text[pos:].lstrip()
            if not rest:
                break
            col = len(text) - len(rest) + 1
            raise ExprSyntaxError("unexpected character", line, col, rest[0])
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind) + 1))
        pos = m.end()
    tokens.append(("end", "", len(text) + 1))
    return tokens


class _Parser:
    def __init__(self, text: str, line: int):
        self.tokens = _tokenize(text, line)
        self.line = line
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def fail(self, message: str):
        kind, text, col = self.peek()
        token = text if kind != "end" else "<end of input>"
        raise ExprSyntaxError(message, self.line, col, token)

    def expect_op(self, symbol: str):
        kind, text, _ = self.peek()
        if kind != "op" or text != symbol:
            self.fail(f"expected '{symbol}'")
        self.advance()

    # grammar rules -------------------------------------------------------

    def expr(self) -> Expression:
        node = self.term()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "+-":
                self.advance()
                node = BinOp(text, node, self.term())
            else:
                return node

    def term(self) -> Expression:
        node = self.factor()
        while True:
            kind, text, _ = self.peek()
            if kind == "op" and text in "*/":
                self.advance()
                node = BinOp(text, node, self.factor())
            else:
                return node

    def factor(self) -> Expression:
        kind, text, _ = self.peek()
        if kind == "op" and text == "-":
            self.advance()
            return Neg(self.factor())
        return self.power()

    def power(self) -> Expression:
        node = self.base()
        kind, text, _ = self.peek()
        if kind == "op" and text == "^":
            self.advance()
            return BinOp("^", node, self.factor())
        return node

    def base(self) -> Expression:
        kind, text, _ = self.peek()
        if kind == "num":
            self.advance()
            return Const(float(text))
        if kind == "ident":
            self.advance()
            nkind, ntext, _ = self.peek()
            if nkind == "op" and ntext == "(":
                if text not in FUNCTIONS:
                    self.i -= 1
                    self.fail(f"unknown function '{text}'")
                self.advance()
                arg = self.expr()
                self.expect_op(")")
                return Call(text, arg)
            if text in FUNCTIONS:
                self.i -= 1
                self.fail(f"function name '{text}' used as a variable")
            return Var(text)
        if kind == "op" and text == "(":
            self.advance()
            node = self.expr()
            self.expect_op(")")
            return node
        self.fail("expected a number, variable, function call or parenthesis")


def parse(text: str, line: int = 1) -> Expression:
    """Parse infix formula text into an expression tree.

    ``line`` is only used to report positions in multi-line sources such as
    model files.  Raises :class:`ExprSyntaxError` on malformed input.
    """
    p = _Parser(text, line)
    node = p.expr()
    if p.peek()[0] != "end":
        p.fail("unexpected trailing input")
    return node


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

def _prec(e: Expression) -> int:
    if isinstance(e, BinOp):
        if e.op in "+-":
            return 1
        if e.op in "*/":
            return 2
        return 4  # ^
    if isinstance(e, Neg):
        return 3
    if isinstance(e, Const) and e.value < 0:
        return 3  # prints with a leading minus sign
    return 5


def _child(e: Expression, min_prec: int) -> str:
    s = to_string(e)
    return f"({s})" if _prec(e) < min_prec else s


def to_string(e: Expression) -> str:
    """Render an expression; parse(to_string(e)) rebuilds parse output exactly."""
    if isinstance(e, Const):
        v = e.value
        if math.isfinite(v) and v == int(v) and abs(v) < 1e16:
            return str(int(v))
        return repr(v)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return "-" + _child(e.arg, 3)
    if isinstance(e, Call):
        return f"{e.func}({to_string(e.arg)})"
    if isinstance(e, BinOp):
        if e.op in "+-":
            return f"{_child(e.left, 1)} {e.op} {_child(e.right, 2)}"
        if e.op in "*/":
            return f"{_child(e.left, 2)}{e.op}{_child(e.right, 3)}"
        return f"{_child(e.left, 5)}^{_child(e.right, 3)}"
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(e: Expression, binding: Mapping[str, float]) -> float:
    """Numerically evaluate ``e`` with every free variable bound.

    Raises :class:`EvaluationError` naming the variable or sub-expression on
    unbound variables and domain errors (log of a non-positive value,
    division by zero, fractional power of a negative base).
    """
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        try:
            return float(binding[e.name])
        except KeyError:
            raise EvaluationError(f"unbound variable '{e.name}'") from None
    if isinstance(e, Neg):
        return -evaluate(e.arg, binding)
    if isinstance(e, BinOp):
        a = evaluate(e.left, binding)
        b = evaluate(e.right, binding)
        try:
            if e.op == "+":
                return a + b
            if e.op == "-":
                return a - b
            if e.op == "*":
                return a * b
            if e.op == "/":
                return a / b
            return math.pow(a, b)
        except ZeroDivisionError:
            raise EvaluationError(f"division by zero in '{to_string(e)}'") from None
        except (ValueError, OverflowError) as exc:
            raise EvaluationError(f"{exc} in '{to_string(e)}'") from None
    if isinstance(e, Call):
        a = evaluate(e.arg, binding)
        try:
            return FUNCTIONS[e.func](a)
        except ValueError:
            raise EvaluationError(
                f"domain error: {e.func}({a!r}) in '{to_string(e)}'"
            ) from None
        except OverflowError:
            raise EvaluationError(
                f"overflow: {e.func}({a!r}) in '{to_string(e)}'"
            ) from None
    raise TypeError(f"not an expression: {e!r}")


def free_variables(e: Expression) -> set:
    """Exact set of variable names occurring in ``e``."""
    if isinstance(e, Const):
        return set()
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Neg):
        return free_variables(e.arg)
    if isinstance(e, Call):
        return free_variables(e.arg)
    if isinstance(e, BinOp):
        return free_variables(e.left) | free_variables(e.right)
    raise TypeError(f"not an expression: {e!r}")


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _diff(e: Expression, v: str) -> Expression:
    if isinstance(e, Const):
        return _ZERO
    if isinstance(e, Var):
        return _ONE if e.name == v else _ZERO
    if isinstance(e, Neg):
        return Neg(_diff(e.arg, v))
    if isinstance(e, BinOp):
        l, r = e.left, e.right
        dl, dr = _diff(l, v), _diff(r, v)
        if e.op == "+":
            return BinOp("+", dl, dr)
        if e.op == "-":
            return BinOp("-", dl, dr)
        if e.op == "*":
            return BinOp("+", BinOp("*", dl, r), BinOp("*", l, dr))
        if e.op == "/":
            num = BinOp("-", BinOp("*", dl, r), BinOp("*", l, dr))
            return BinOp("/", num, BinOp("^", r, Const(2.0)))
        # power
        if isinstance(r, Const):
            return BinOp(
                "*",
                BinOp("*", r, BinOp("^", l, Const(r.value - 1.0))),
                dl,
            )
        if isinstance(l, Const):
            return BinOp("*", BinOp("*", e, Call("log", l)), dr)
        # general a^b = exp(b log a)
        inner = BinOp("+", BinOp("*", dr, Call("log", l)), BinOp("*", r, BinOp("/", dl, l)))
        return BinOp("*", e, inner)
    if isinstance(e, Call):
        da = _diff(e.arg, v)
        a = e.arg
        if e.func == "exp":
            outer = Call("exp", a)
        elif e.func == "log":
            return BinOp("/", da, a)
        elif e.func == "sqrt":
            return BinOp("/", da, BinOp("*", Const(2.0), Call("sqrt", a)))
        elif e.func == "sin":
            outer = Call("cos", a)
        elif e.func == "cos":
            outer = Neg(Call("sin", a))
        elif e.func == "tan":
            return BinOp("/", da, BinOp("^", Call("cos", a), Const(2.0)))
        elif e.func == "atan":
            return BinOp("/", da, BinOp("+", Const(1.0), BinOp("^", a, Const(2.0))))
        else:  # pragma: no cover - parser rejects unknown functions
            raise ExprError(f"cannot differentiate unknown function '{e.func}'")
        return BinOp("*", outer, da)
    raise TypeError(f"not an expression: {e!r}")


def differentiate(e: Expression, v: str) -> Expression:
    """Exact symbolic partial derivative of ``e`` with respect to ``v``, simplified."""
    return simplify(_diff(e, v))


# ---------------------------------------------------------------------------
# simplification
# ---------------------------------------------------------------------------

def _is_const(e: Expression, value=None) -> bool:
    if not isinstance(e, Const):
        return False
    return True if value is None else e.value == value


def _fold_call(func: str, a: float):
    try:
        v = FUNCTIONS[func](a)
    except (ValueError, OverflowError):
        return None
    return Const(v) if math.isfinite(v) else None


def _fold_binop(op: str, a: float, b: float):
    try:
        if op == "+":
            v = a + b
        elif op == "-":
            v = a - b
        elif op == "*":
            v = a * b
        elif op == "/":
            v = a / b
        else:
            v = math.pow(a, b)
    except (ZeroDivisionError, ValueError, OverflowError):
        return None
    return Const(v) if math.isfinite(v) else None


def _spass(e: Expression) -> Expression:
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Neg):
        a = _spass(e.arg)
        if isinstance(a, Const):
            return Const(-a.value)
        if isinstance(a, Neg):
            return a.arg
        return Neg(a)
    if isinstance(e, Call):
        a = _spass(e.arg)
        if isinstance(a, Const):
            folded = _fold_call(e.func, a.value)
            if folded is not None:
                return folded
        return Call(e.func, a)
    if isinstance(e, BinOp):
        l = _spass(e.left)
        r = _spass(e.right)
        if isinstance(l, Const) and isinstance(r, Const):
            folded = _fold_binop(e.op, l.value, r.value)
            if folded is not None:
                return folded
        if e.op == "+":
            if _is_const(l, 0.0):
                return r
            if _is_const(r, 0.0):
                return l
        elif e.op == "-":
            if _is_const(r, 0.0):
                return l
            if _is_const(l, 0.0):
                return Const(-r.value) if isinstance(r, Const) else Neg(r)
            if l == r:
                return _ZERO
        elif e.op == "*":
            if _is_const(l, 0.0) or _is_const(r, 0.0):
                return _ZERO
            if _is_const(l, 1.0):
                return r
            if _is_const(r, 1.0):
                return l
            if _is_const(l, -1.0):
                return Neg(r)
            if _is_const(r, -1.0):
                return Neg(l)
        elif e.op == "/":
            if _is_const(l, 0.0):
                return _ZERO
            if _is_const(r, 1.0):
                return l
        elif e.op == "^":
            if _is_const(r, 1.0):
                return l
            if _is_const(r, 0.0):
                return _ONE
            if _is_const(l, 1.0):
                return _ONE
        return BinOp(e.op, l, r)
    raise TypeError(f"not an expression: {e!r}")


def simplify(e: Expression) -> Expression:
    """Best-effort structural simplification: constant folding plus the
    identities 0+x, x*0, x*1, x^1, x^0, exp-style constant folds and double
    negation.  Idempotent: the result is a fixed point of the rewrite pass.
    """
    cur = e
    for _ in range(100):
        nxt = _spass(cur)
        if nxt == cur:
            return cur
        cur = nxt
    return cur  # pragma: no cover - passes converge in a few rounds


# ---------------------------------------------------------------------------
# sum-of-products expansion for structural zero detection
# ---------------------------------------------------------------------------

_MAX_POW_EXPAND = 6


def _atomic(e: Expression, exponent: int = 1):
    key = to_string(simplify(e))
    return {((key, exponent),): 1.0}


def _merge_factors(fa, fb):
    exps = dict(fa)
    for key, p in fb:
        exps[key] = exps.get(key, 0) + p
        if exps[key] == 0:
            del exps[key]
    return tuple(sorted(exps.items()))


def _tmul(ta, tb):
    out = {}
    for fa, ca in ta.items():
        for fb, cb in tb.items():
            key = _merge_factors(fa, fb)
            out[key] = out.get(key, 0.0) + ca * cb
    return {k: c for k, c in out.items() if c != 0.0}


def _tadd(ta, tb, sign=1.0):
    out = dict(ta)
    for k, c in tb.items():
        out[k] = out.get(k, 0.0) + sign * c
    return {k: c for k, c in out.items() if c != 0.0}


def _terms(e: Expression):
    """Expand into a {factor-multiset: coefficient} map (distributes products
    over sums, merges syntactically equal monomials).  Non-polynomial parts
    (function calls, symbolic exponents) stay atomic, keyed by their printed
    simplified form, so the result is a conservative normal form."""
    if isinstance(e, Const):
        return {(): e.value} if e.value != 0.0 else {}
    if isinstance(e, Var):
        return {((e.name, 1),): 1.0}
    if isinstance(e, Neg):
        return {k: -c for k, c in _terms(e.arg).items()}
    if isinstance(e, BinOp):
        if e.op == "+":
            return _tadd(_terms(e.left), _terms(e.right))
        if e.op == "-":
            return _tadd(_terms(e.left), _terms(e.right), sign=-1.0)
        if e.op == "*":
            return _tmul(_terms(e.left), _terms(e.right))
        if e.op == "/":
            tr = _terms(e.right)
            if len(tr) == 1:
                (fac, c), = tr.items()
                if c != 0.0:
                    inv = {tuple((k, -p) for k, p in fac): 1.0 / c}
                    return _tmul(_terms(e.left), inv)
            return _tmul(_terms(e.left), _atomic(e.right, exponent=-1))
        # power
        if isinstance(e.right, Const) and float(e.right.value).is_integer():
            k = int(e.right.value)
            if k == 0:
                return {(): 1.0}
            base = _terms(e.left)
            if len(base) == 1:
                (fac, c), = base.items()
                try:
                    coef = c ** k
                except (OverflowError, ZeroDivisionError):
                    return _atomic(e)
                return {tuple((key, p * k) for key, p in fac): coef}
            if 1 <= k <= _MAX_POW_EXPAND:
                out = base
                for _ in range(k - 1):
                    out = _tmul(out, base)
                return out
        return _atomic(e)
    if isinstance(e, Call):
        return _atomic(e)
    raise TypeError(f"not an expression: {e!r}")


def is_structural_zero(e: Expression) -> bool:
    """True when sum-of-products expansion cancels every term exactly.

    This is the zero test used for linearity classification; it is
    conservative (may report False for expressions that are zero only by
    non-structural identities), which errs toward the nonlinear filter path.
    """
    return not _terms(simplify(e))


# ---------------------------------------------------------------------------
# code generation
# ---------------------------------------------------------------------------

def python_source(e: Expression, rename: Mapping[str, str]) -> str:
    """Render ``e`` as a Python expression string.

    Variables are substituted via ``rename`` (KeyError raised as ExprError
    for names without a mapping); powers use ``pow()`` so runtime domain
    errors raise rather than silently producing complex values.
    """
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        try:
            return rename[e.name]
        except KeyError:
            raise ExprError(f"no code-generation binding for variable '{e.name}'") from None
    if isinstance(e, Neg):
        return f"(-{python_source(e.arg, rename)})"
    if isinstance(e, Call):
        return f"{e.func}({python_source(e.arg, rename)})"
    if isinstance(e, BinOp):
        l = python_source(e.left, rename)
        r = python_source(e.right, rename)
        if e.op == "^":
            return f"pow({l}, {r})"
        return f"({l} {e.op} {r})"
    raise TypeError(f"not an expression: {e!r}")
