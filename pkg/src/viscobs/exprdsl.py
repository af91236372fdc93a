"""Small closed-form expression language with exact symbolic derivatives.

Expressions are parsed by recursive descent into an immutable tree, evaluated
with numpy (scalars or arrays), and differentiated symbolically.  Evaluation
never returns NaN or Inf: invalid operations raise DomainError instead.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence, Union

import numpy as np


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnknownIdentifier(ExprError):
    pass


class ArityError(ExprError):
    pass


class DomainError(ExprError):
    pass


class MissingBinding(ExprError):
    pass


# ---------------------------------------------------------------- tree nodes

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
    name: str
    args: tuple


Node = Union[Num, Var, Neg, Bin, Call]

CONSTANTS = {"pi": math.pi, "e": math.e}

# name -> arity.  sign, ramp and smoothstep_int keep the language closed
# under differentiation (abs/min/max and smoothstep profiles).
ARITY = {
    "sin": 1, "cos": 1, "tan": 1, "exp": 1, "log": 1, "sqrt": 1, "abs": 1,
    "tanh": 1, "sign": 1, "min": 2, "max": 2,
    "ramp": 3, "smoothstep": 3, "smoothstep_int": 3,
}


# ---------------------------------------------------------------- tokenizer

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str, variables: Sequence[str]):
        self.text = text
        self.variables = tuple(variables)
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value or kind == "end":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", pos)
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
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            # right-associative; exponent may carry its own sign
            return Bin("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, val, pos = self.take()
        if kind == "num":
            return Num(float(val))
        if kind == "id":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                if val not in ARITY:
                    raise UnknownIdentifier(f"unknown function {val!r} at offset {pos}")
                self.take()
                args = []
                if self.peek()[1] != ")":
                    args.append(self.expr())
                    while self.peek()[1] == ",":
                        self.take()
                        args.append(self.expr())
                self.expect(")")
                if len(args) != ARITY[val]:
                    raise ArityError(
                        f"{val} expects {ARITY[val]} argument(s), got {len(args)} (offset {pos})")
                return Call(val, tuple(args))
            if val in self.variables:
                return Var(val)
            if val in CONSTANTS:
                return Num(CONSTANTS[val])
            if val in ARITY:
                raise ArityError(f"function {val!r} used without arguments (offset {pos})")
            raise UnknownIdentifier(f"unknown identifier {val!r} at offset {pos}")
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(val)
        raise ExprSyntaxError(f"unexpected {what}", pos)


# ---------------------------------------------------------------- evaluation

def _check(value, what: str):
    if not np.all(np.isfinite(value)):
        raise DomainError(f"non-finite result in {what}")
    return value


def _div(a, b):
    if np.any(b == 0):
        raise DomainError("division by zero")
    return np.true_divide(a, b)


def _pow(a, b):
    a_arr, b_arr = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    if np.any((a_arr < 0) & (b_arr != np.round(b_arr))):
        raise DomainError("negative base with non-integer exponent")
    if np.any((a_arr == 0) & (b_arr < 0)):
        raise DomainError("zero raised to a negative power")
    return np.power(a, b)


def _log(a):
    if np.any(np.asarray(a) <= 0):
        raise DomainError("log of a nonpositive number")
    return np.log(a)


def _sqrt(a):
    if np.any(np.asarray(a) < 0):
        raise DomainError("sqrt of a negative number")
    return np.sqrt(a)


def _ramp(a, b, s):
    return np.clip(_div(np.subtract(s, a), np.subtract(b, a)), 0.0, 1.0)


def _smoothstep(a, b, s):
    r = _ramp(a, b, s)
    return r * r * (3.0 - 2.0 * r)


def _smoothstep_int(a, b, s):
    r = _ramp(a, b, s)
    return np.subtract(b, a) * (r ** 3 - 0.5 * r ** 4) + np.maximum(np.subtract(s, b), 0.0)


_FUNCS: dict = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": _log,
    "sqrt": _sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
    "sign": np.sign,
    "min": np.minimum,
    "max": np.maximum,
    "ramp": _ramp,
    "smoothstep": _smoothstep,
    "smoothstep_int": _smoothstep_int,
}

# overflow in +, -, * and exp surfaces in the final finiteness check
_BINOPS = {
    "+": np.add,
    "-": np.subtract,
    "*": np.multiply,
    "/": _div,
    "^": _pow,
}


def _compile(node: Node) -> Callable[[Mapping], object]:
    if isinstance(node, Num):
        v = node.value
        return lambda env: v
    if isinstance(node, Var):
        name = node.name
        return lambda env: env[name]
    if isinstance(node, Neg):
        inner = _compile(node.arg)
        return lambda env: np.negative(inner(env))
    if isinstance(node, Bin):
        lf, rf, op = _compile(node.left), _compile(node.right), _BINOPS[node.op]
        return lambda env: op(lf(env), rf(env))
    if isinstance(node, Call):
        fn = _FUNCS[node.name]
        argf = [_compile(a) for a in node.args]
        if len(argf) == 1:
            a0 = argf[0]
            return lambda env: fn(a0(env))
        return lambda env: fn(*[g(env) for g in argf])
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------- printing

def to_text(node: Node) -> str:
    if isinstance(node, Num):
        return repr(node.value) if node.value >= 0 else f"({node.value!r})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_text(node.arg)})"
    if isinstance(node, Bin):
        return f"({to_text(node.left)} {node.op} {to_text(node.right)})"
    return f"{node.name}({', '.join(to_text(a) for a in node.args)})"


# ---------------------------------------------------------------- expression object

@dataclass(frozen=True)
class ScalarExpr:
    root: Node
    variables: tuple
    source: str
    _fn: Callable = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_fn", _compile(self.root))

    def __call__(self, *args, **kwargs):
        if args:
            if len(args) != len(self.variables):
                raise MissingBinding(
                    f"expected {len(self.variables)} positional values, got {len(args)}")
            kwargs = dict(zip(self.variables, args), **kwargs)
        return eval_expr(self, kwargs)

    def text(self) -> str:
        return to_text(self.root)

    def depends_on(self, var: str) -> bool:
        return _depends(self.root, var)

    def diff(self, var: str) -> "ScalarExpr":
        return differentiate(self, var)

    def is_constant(self) -> bool:
        return not any(self.depends_on(v) for v in self.variables)


def parse_expr(text: str, variables: Sequence[str] = ("s",)) -> ScalarExpr:
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    root = _Parser(text, variables).parse()
    return ScalarExpr(root, tuple(variables), text)


def eval_expr(e: ScalarExpr, bindings: Mapping[str, object]):
    missing = [v for v in e.variables if v not in bindings]
    if missing:
        raise MissingBinding(f"no value bound for {', '.join(missing)}")
    env = {}
    shape = None
    for v in e.variables:
        val = np.asarray(bindings[v], dtype=float)
        if not np.all(np.isfinite(val)):
            raise DomainError(f"non-finite input for {v}")
        env[v] = val if val.ndim else float(val)
        if val.ndim:
            shape = np.broadcast_shapes(shape, val.shape) if shape is not None else val.shape
    with np.errstate(all="ignore"):
        out = e._fn(env)
    out = _check(out, "expression")
    if shape is None:
        return float(out)
    return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()


# ---------------------------------------------------------------- differentiation

ZERO = Num(0.0)
ONE = Num(1.0)


def _depends(node: Node, var: str) -> bool:
    if isinstance(node, Var):
        return node.name == var
    if isinstance(node, Num):
        return False
    if isinstance(node, Neg):
        return _depends(node.arg, var)
    if isinstance(node, Bin):
        return _depends(node.left, var) or _depends(node.right, var)
    return any(_depends(a, var) for a in node.args)


def _is(node: Node, value: float) -> bool:
    return isinstance(node, Num) and node.value == value


def neg(a: Node) -> Node:
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a: Node, b: Node) -> Node:
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    return Bin("+", a, b)


def sub(a: Node, b: Node) -> Node:
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    return Bin("-", a, b)


def mul(a: Node, b: Node) -> Node:
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    return Bin("*", a, b)


def div(a: Node, b: Node) -> Node:
    if _is(a, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0.0:
        return Num(a.value / b.value)
    return Bin("/", a, b)


def power(a: Node, b: Node) -> Node:
    if _is(b, 1.0):
        return a
    if _is(b, 0.0):
        return ONE
    return Bin("^", a, b)


def call(name: str, *args: Node) -> Node:
    return Call(name, tuple(args))


def _ramp_tree(a: Node, b: Node, s: Node) -> Node:
    return call("min", call("max", div(sub(s, a), sub(b, a)), ZERO), ONE)


def _d(node: Node, var: str) -> Node:
    if not _depends(node, var):
        return ZERO
    if isinstance(node, Var):
        return ONE
    if isinstance(node, Neg):
        return neg(_d(node.arg, var))
    if isinstance(node, Bin):
        a, b, op = node.left, node.right, node.op
        da, db = _d(a, var), _d(b, var)
        if op == "+":
            return add(da, db)
        if op == "-":
            return sub(da, db)
        if op == "*":
            return add(mul(da, b), mul(a, db))
        if op == "/":
            return sub(div(da, b), div(mul(a, db), power(b, Num(2.0))))
        # power
        if not _depends(b, var):
            expo = sub(b, ONE) if not isinstance(b, Num) else Num(b.value - 1.0)
            return mul(mul(b, power(a, expo)), da)
        if not _depends(a, var):
            return mul(mul(node, call("log", a)), db)
        return mul(node, add(mul(db, call("log", a)), div(mul(b, da), a)))
    name, args = node.name, node.args
    if name in ("min", "max"):
        a, b = args
        da, db = _d(a, var), _d(b, var)
        half_sum = div(add(da, db), Num(2.0))
        half_jump = mul(call("sign", sub(a, b)), div(sub(da, db), Num(2.0)))
        return sub(half_sum, half_jump) if name == "min" else add(half_sum, half_jump)
    if name == "ramp":
        return _d(_ramp_tree(*args), var)
    if name == "smoothstep":
        r = call("ramp", *args)
        dr = _d(_ramp_tree(*args), var)
        return mul(mul(mul(Num(6.0), r), sub(ONE, r)), dr)
    if name == "smoothstep_int":
        a, b, s = args
        r = call("ramp", a, b, s)
        poly = sub(power(r, Num(3.0)), div(power(r, Num(4.0)), Num(2.0)))
        dr = _d(_ramp_tree(a, b, s), var)
        return add(add(mul(sub(_d(b, var), _d(a, var)), poly),
                       mul(mul(sub(b, a), call("smoothstep", a, b, s)), dr)),
                   _d(call("max", sub(s, b), ZERO), var))
    (a,) = args
    da = _d(a, var)
    if name == "sin":
        outer = call("cos", a)
    elif name == "cos":
        outer = neg(call("sin", a))
    elif name == "tan":
        outer = add(ONE, power(call("tan", a), Num(2.0)))
    elif name == "exp":
        outer = node
    elif name == "log":
        return div(da, a)
    elif name == "sqrt":
        return div(da, mul(Num(2.0), node))
    elif name == "abs":
        outer = call("sign", a)
    elif name == "tanh":
        outer = sub(ONE, power(node, Num(2.0)))
    elif name == "sign":
        return ZERO
    else:  # pragma: no cover - ARITY and this table are kept in sync
        raise UnknownIdentifier(name)
    return mul(outer, da)


def differentiate(e: ScalarExpr, var: str) -> ScalarExpr:
    if var not in e.variables:
        raise UnknownIdentifier(f"{var!r} is not a declared variable")
    root = _d(e.root, var)
    return ScalarExpr(root, e.variables, to_text(root))


def gradient(e: ScalarExpr) -> list:
    return [differentiate(e, v) for v in e.variables]


def drop_additive_constants(e: ScalarExpr) -> ScalarExpr:
    """e with constant terms of its top-level sum removed (e and the result differ by a constant).

    Used where only f modulo constants matters, so that f and f + c sample to identical arrays.
    """
    def strip(node):
        if not any(_depends(node, v) for v in e.variables):
            return None
        if isinstance(node, Bin) and node.op in "+-":
            left, right = strip(node.left), strip(node.right)
            if right is None:
                return left
            if left is None:
                return right if node.op == "+" else neg(right)
            return add(left, right) if node.op == "+" else sub(left, right)
        if isinstance(node, Neg):
            inner = strip(node.arg)
            return None if inner is None else neg(inner)
        return node

    root = strip(e.root)
    if root is None:
        root = Num(0.0)
    if root is e.root:
        return e
    return ScalarExpr(root, e.variables, to_text(root))


def constant(value: float, variables: Sequence[str] = ("s",)) -> ScalarExpr:
    return ScalarExpr(Num(float(value)), tuple(variables), repr(float(value)))
