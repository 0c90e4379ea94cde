"""The expression language embedded in machine descriptions.

Covers everything description authors can write in value/guard/delay/case
fields: literals, arithmetic and boolean operators, comparisons, list
literals, member access on maps, the four list macros (map, filter,
contains, exists_one), and the utility functions size() and rand().

Evaluation happens against an Environment: an ordered chain of name->value
frames (innermost first) with an optional persistent store consulted last.
Missing names are hard errors, never silent nulls.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional, Sequence

from .values import (
    Value,
    check_int64,
    is_number,
    type_name,
    values_equal,
)

MACRO_NAMES = ("map", "filter", "contains", "exists_one")


class ExpressionError(Exception):
    """Base class for every expression-level failure."""


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, position: int, expected: str, message: str | None = None):
        self.position = position
        self.expected = expected
        super().__init__(message or f"syntax error at {position}: expected {expected}")


class EvalError(ExpressionError):
    pass


class UnboundVariableError(EvalError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"unbound variable: {name}")


class TypeMismatchError(EvalError):
    def __init__(self, op: str, got: str):
        self.op = op
        self.got = got
        super().__init__(f"type mismatch in {op}: got {got}")


class DivisionByZeroError(EvalError):
    def __init__(self):
        super().__init__("division by zero")


class IntegerOverflowError(EvalError):
    def __init__(self):
        super().__init__("integer arithmetic overflowed 64-bit range")


class UnknownMemberError(EvalError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"no such member: {name}")


class GuardNotBooleanError(EvalError):
    def __init__(self, expression: str, got: str):
        self.expression = expression
        super().__init__(f"guard {expression!r} evaluated to {got}, not boolean")


# --- AST ---------------------------------------------------------------


@dataclass(frozen=True)
class Literal:
    value: Value


@dataclass(frozen=True)
class ListLit:
    items: tuple


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class Member:
    obj: object
    name: str


@dataclass(frozen=True)
class MacroCall:
    obj: object
    kind: str  # one of MACRO_NAMES
    binder: str
    body: object


@dataclass(frozen=True)
class FuncCall:
    name: str
    args: tuple


Expression = object  # union of the node classes above


# --- Tokenizer ---------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<float>\d+\.\d+(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*")
  | (?P<op><=|>=|==|!=|&&|\|\||[-+*/%<>!()\[\],.])
    """,
    re.VERBOSE,
)

_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "\\": "\\", "'": "'", '"': '"'}


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExpressionSyntaxError(pos, "a token", f"unexpected character {text[pos]!r} at {pos}")
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


def _unquote(raw: str) -> str:
    body = raw[1:-1]
    out = []
    i = 0
    while i < len(body):
        c = body[i]
        if c == "\\" and i + 1 < len(body):
            out.append(_ESCAPES.get(body[i + 1], body[i + 1]))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


# --- Parser ------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def expect(self, text: str) -> _Token:
        t = self.peek()
        if t.text != text:
            raise ExpressionSyntaxError(t.pos, repr(text))
        return self.next()

    def at_op(self, *ops: str) -> bool:
        t = self.peek()
        return t.kind == "op" and t.text in ops

    def parse(self) -> Expression:
        e = self.parse_or()
        t = self.peek()
        if t.kind != "eof":
            raise ExpressionSyntaxError(t.pos, "end of expression")
        return e

    def parse_or(self) -> Expression:
        left = self.parse_and()
        while self.at_op("||"):
            self.next()
            left = Binary("||", left, self.parse_and())
        return left

    def parse_and(self) -> Expression:
        left = self.parse_cmp()
        while self.at_op("&&"):
            self.next()
            left = Binary("&&", left, self.parse_cmp())
        return left

    def parse_cmp(self) -> Expression:
        left = self.parse_add()
        if self.at_op("<", "<=", ">", ">=", "==", "!="):
            op = self.next().text
            return Binary(op, left, self.parse_add())
        return left

    def parse_add(self) -> Expression:
        left = self.parse_mul()
        while self.at_op("+", "-"):
            op = self.next().text
            left = Binary(op, left, self.parse_mul())
        return left

    def parse_mul(self) -> Expression:
        left = self.parse_unary()
        while self.at_op("*", "/", "%"):
            op = self.next().text
            left = Binary(op, left, self.parse_unary())
        return left

    def parse_unary(self) -> Expression:
        if self.at_op("-", "!"):
            op = self.next().text
            return Unary(op, self.parse_unary())
        return self.parse_postfix()

    def parse_postfix(self) -> Expression:
        e = self.parse_primary()
        while self.at_op("."):
            self.next()
            t = self.peek()
            if t.kind != "ident":
                raise ExpressionSyntaxError(t.pos, "member or macro name")
            name = self.next().text
            if self.at_op("(") and name in MACRO_NAMES:
                self.next()
                binder_tok = self.peek()
                if binder_tok.kind != "ident":
                    raise ExpressionSyntaxError(binder_tok.pos, "binder identifier")
                binder = self.next().text
                self.expect(",")
                body = self.parse_or()
                self.expect(")")
                e = MacroCall(e, name, binder, body)
            elif self.at_op("("):
                raise ExpressionSyntaxError(t.pos, f"one of {MACRO_NAMES}")
            else:
                e = Member(e, name)
        return e

    def parse_primary(self) -> Expression:
        t = self.peek()
        if t.kind == "int":
            self.next()
            return Literal(check_int64(int(t.text)))
        if t.kind == "float":
            self.next()
            return Literal(float(t.text))
        if t.kind == "string":
            self.next()
            return Literal(_unquote(t.text))
        if t.kind == "ident":
            self.next()
            if t.text == "true":
                return Literal(True)
            if t.text == "false":
                return Literal(False)
            if t.text == "null":
                return Literal(None)
            if self.at_op("("):
                self.next()
                args = []
                if not self.at_op(")"):
                    args.append(self.parse_or())
                    while self.at_op(","):
                        self.next()
                        args.append(self.parse_or())
                self.expect(")")
                return FuncCall(t.text, tuple(args))
            return Var(t.text)
        if t.text == "[":
            self.next()
            items = []
            if not self.at_op("]"):
                items.append(self.parse_or())
                while self.at_op(","):
                    self.next()
                    items.append(self.parse_or())
            self.expect("]")
            return ListLit(tuple(items))
        if t.text == "(":
            self.next()
            e = self.parse_or()
            self.expect(")")
            return e
        raise ExpressionSyntaxError(t.pos, "an expression")


@lru_cache(maxsize=4096)
def parse_expression(text: str) -> Expression:
    """Parse expression source into an AST. Results are cached; ASTs are
    immutable and safe to share."""
    return _Parser(text).parse()


# --- Environment -------------------------------------------------------


class StoreView:
    """Read access the evaluator needs from a persistent store."""

    def lookup(self, name: str) -> tuple[bool, Value]:
        raise NotImplementedError


class Environment:
    """Ordered chain of name->value frames, innermost first, with an optional
    persistent store consulted after all frames."""

    def __init__(
        self,
        frames: Sequence[Mapping[str, Value]] = (),
        store: Optional[StoreView] = None,
        rng: Optional[random.Random] = None,
    ):
        self.frames = list(frames)
        self.store = store
        self.rng = rng if rng is not None else random.Random(0)

    def lookup(self, name: str) -> Value:
        for frame in self.frames:
            if name in frame:
                return frame[name]
        if self.store is not None:
            found, value = self.store.lookup(name)
            if found:
                return value
        raise UnboundVariableError(name)

    def child(self, frame: Mapping[str, Value]) -> "Environment":
        env = Environment.__new__(Environment)
        env.frames = [frame, *self.frames]
        env.store = self.store
        env.rng = self.rng
        return env


# --- Evaluator ---------------------------------------------------------


def _num_promote(op: str, a: Value, b: Value) -> tuple:
    if not is_number(a):
        raise TypeMismatchError(op, type_name(a))
    if not is_number(b):
        raise TypeMismatchError(op, type_name(b))
    if isinstance(a, int) and isinstance(b, int):
        return a, b
    return float(a), float(b)


def _int_div(a: int, b: int) -> int:
    # Truncate toward zero, matching conventional integer semantics.
    q = abs(a) // abs(b)
    return -q if (a < 0) != (b < 0) else q


def _arith(op: str, a: Value, b: Value) -> Value:
    if op == "+":
        if isinstance(a, str) and isinstance(b, str):
            return a + b
        if isinstance(a, list) and isinstance(b, list):
            return a + b
    a, b = _num_promote(op, a, b)
    both_int = isinstance(a, int)
    try:
        if op == "+":
            r = a + b
        elif op == "-":
            r = a - b
        elif op == "*":
            r = a * b
        elif op == "/":
            if b == 0:
                raise DivisionByZeroError()
            r = _int_div(a, b) if both_int else a / b
        elif op == "%":
            if b == 0:
                raise DivisionByZeroError()
            r = a - _int_div(a, b) * b if both_int else a % b
        else:  # pragma: no cover - parser admits only the ops above
            raise AssertionError(op)
    except OverflowError:
        raise IntegerOverflowError() from None
    if both_int:
        try:
            check_int64(r)
        except OverflowError:
            raise IntegerOverflowError() from None
    return r


def _compare(op: str, a: Value, b: Value) -> bool:
    if op == "==":
        return values_equal(a, b)
    if op == "!=":
        return not values_equal(a, b)
    if isinstance(a, str) and isinstance(b, str):
        pass
    else:
        a, b = _num_promote(op, a, b)
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def _require_bool(op: str, v: Value) -> bool:
    if not isinstance(v, bool):
        raise TypeMismatchError(op, type_name(v))
    return v


def evaluate(e: Expression, env: Environment) -> Value:
    """Evaluate an AST against an environment. Pure: no effect on env."""
    if isinstance(e, Literal):
        return e.value
    if isinstance(e, Var):
        return env.lookup(e.name)
    if isinstance(e, ListLit):
        return [evaluate(item, env) for item in e.items]
    if isinstance(e, Unary):
        v = evaluate(e.operand, env)
        if e.op == "!":
            return not _require_bool("!", v)
        if not is_number(v):
            raise TypeMismatchError("-", type_name(v))
        r = -v
        if isinstance(r, int):
            try:
                check_int64(r)
            except OverflowError:
                raise IntegerOverflowError() from None
        return r
    if isinstance(e, Binary):
        if e.op == "&&":
            if not _require_bool("&&", evaluate(e.left, env)):
                return False
            return _require_bool("&&", evaluate(e.right, env))
        if e.op == "||":
            if _require_bool("||", evaluate(e.left, env)):
                return True
            return _require_bool("||", evaluate(e.right, env))
        left = evaluate(e.left, env)
        right = evaluate(e.right, env)
        if e.op in ("<", "<=", ">", ">=", "==", "!="):
            return _compare(e.op, left, right)
        return _arith(e.op, left, right)
    if isinstance(e, Member):
        obj = evaluate(e.obj, env)
        if not isinstance(obj, dict):
            raise TypeMismatchError(f".{e.name}", type_name(obj))
        if e.name not in obj:
            raise UnknownMemberError(e.name)
        return obj[e.name]
    if isinstance(e, MacroCall):
        target = evaluate(e.obj, env)
        if not isinstance(target, list):
            raise TypeMismatchError(e.kind, type_name(target))
        frame: dict = {}
        inner = env.child(frame)
        if e.kind == "map":
            out = []
            for item in target:
                frame[e.binder] = item
                out.append(evaluate(e.body, inner))
            return out
        matches = 0
        kept = []
        for item in target:
            frame[e.binder] = item
            hit = evaluate(e.body, inner)
            if not isinstance(hit, bool):
                raise TypeMismatchError(e.kind, type_name(hit))
            if hit:
                matches += 1
                kept.append(item)
        if e.kind == "filter":
            return kept
        if e.kind == "contains":
            return matches >= 1
        return matches == 1  # exists_one
    if isinstance(e, FuncCall):
        if e.name == "rand":
            if e.args:
                raise TypeMismatchError("rand", f"{len(e.args)} arguments")
            return env.rng.random()
        if e.name == "size":
            if len(e.args) != 1:
                raise TypeMismatchError("size", f"{len(e.args)} arguments")
            v = evaluate(e.args[0], env)
            if isinstance(v, (list, str, dict)):
                return len(v)
            raise TypeMismatchError("size", type_name(v))
        raise EvalError(f"unknown function: {e.name}")
    raise AssertionError(f"unknown AST node {e!r}")  # pragma: no cover


def evaluate_text(text: str, env: Environment) -> Value:
    return evaluate(parse_expression(text), env)


def evaluate_guard(guard, env: Environment) -> bool:
    """Evaluate a guard (a GuardDef or raw expression text) to a boolean.
    A non-boolean result is an error, never truthiness."""
    source = getattr(guard, "expression", guard)
    result = evaluate_text(source, env)
    if not isinstance(result, bool):
        raise GuardNotBooleanError(source, type_name(result))
    return result


def guards_pass(guards, env: Environment) -> bool:
    """A guard list passes iff every guard evaluates to true."""
    return all(evaluate_guard(g, env) for g in guards)
