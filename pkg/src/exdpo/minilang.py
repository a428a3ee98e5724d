"""Lexer, parser and interpreter for the task language.

Grammar::

    program := stmt* "return" expr
    stmt    := var "=" expr ";"
    expr    := term (("+" | "-") term)*
    term    := factor (("*" | "/" | "%") factor)*
    factor  := digit | var | "(" expr ")"

Identifiers are single lowercase letters, literals are single digits.  The
parser and evaluator are iterative so that adversarial inputs (thousands of
nested parentheses, very long operator chains) cannot exhaust the Python
stack.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

__all__ = [
    "Token",
    "Num",
    "Var",
    "BinOp",
    "Expr",
    "Program",
    "ParseFailure",
    "ExecError",
    "DEFAULT_STEP_LIMIT",
    "tokenize",
    "parse",
    "parse_source",
    "execute",
    "render",
    "render_expr",
]

DEFAULT_STEP_LIMIT = 10_000

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1

_SINGLE = {
    "+": "PLUS",
    "-": "MINUS",
    "*": "STAR",
    "/": "SLASH",
    "%": "PERCENT",
    "=": "ASSIGN",
    ";": "SEMI",
    "(": "LPAREN",
    ")": "RPAREN",
}
_WHITESPACE = " \t\n\r\f\v"
_KEYWORD = "return"

_ADDITIVE = ("PLUS", "MINUS")
_MULTIPLICATIVE = ("STAR", "SLASH", "PERCENT")
_OP_SYMBOL = {"PLUS": "+", "MINUS": "-", "STAR": "*", "SLASH": "/", "PERCENT": "%"}
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2, "%": 2}


class ParseFailure(Exception):
    """Source text that does not conform to the grammar.

    ``position`` is a character offset into the source.
    """

    def __init__(self, position: int, message: str):
        super().__init__(f"{message} at offset {position}")
        self.position = position
        self.message = message


class ExecError(Exception):
    """Runtime failure of a well-formed program.

    ``kind`` is one of ``DivisionByZero``, ``UndefinedVariable`` or
    ``StepLimitExceeded``; ``location`` is the index of the offending token.
    """

    KINDS = ("DivisionByZero", "UndefinedVariable", "StepLimitExceeded")

    def __init__(self, kind: str, location: int):
        if kind not in self.KINDS:
            raise ValueError(f"unknown ExecError kind {kind!r}")
        super().__init__(f"{kind} at token {location}")
        self.kind = kind
        self.location = location


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    offset: int = field(default=0, compare=False)


# Expression nodes carry the index of their defining token for error
# reporting; it is excluded from equality so that re-parsed canonical text
# compares equal to the original tree.
@dataclass(frozen=True)
class Num:
    value: int
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class Var:
    name: str
    pos: int = field(default=-1, compare=False, repr=False)


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"
    pos: int = field(default=-1, compare=False, repr=False)


Expr = Union[Num, Var, BinOp]


@dataclass(frozen=True)
class Program:
    statements: tuple[tuple[str, Expr], ...]
    return_expr: Expr


def tokenize(source: str) -> list[Token]:
    """Split ``source`` into tokens, skipping whitespace.

    A run of letters spelling ``return`` is the keyword; any other run of
    letters becomes one IDENT per letter.
    """
    tokens: list[Token] = []
    i = 0
    size = len(source)
    while i < size:
        ch = source[i]
        if ch in _WHITESPACE:
            i += 1
        elif "a" <= ch <= "z":
            j = i
            while j < size and "a" <= source[j] <= "z":
                j += 1
            word = source[i:j]
            if word == _KEYWORD:
                tokens.append(Token("RETURN", word, i))
            else:
                tokens.extend(Token("IDENT", c, i + k) for k, c in enumerate(word))
            i = j
        elif "0" <= ch <= "9":
            tokens.append(Token("INT_DIGIT", ch, i))
            i += 1
        elif ch in _SINGLE:
            tokens.append(Token(_SINGLE[ch], ch, i))
            i += 1
        else:
            raise ParseFailure(i, f"illegal character {ch!r}")
    return tokens


class _Parser:
    def __init__(self, tokens: list[Token], source_len: int):
        self.tokens = tokens
        self.i = 0
        self.end = source_len

    def _offset(self) -> int:
        if self.i < len(self.tokens):
            return self.tokens[self.i].offset
        return self.end

    def _fail(self, message: str):
        raise ParseFailure(self._offset(), message)

    def _peek(self) -> str | None:
        if self.i < len(self.tokens):
            return self.tokens[self.i].kind
        return None

    def program(self) -> Program:
        statements = []
        while self._peek() == "IDENT":
            name = self.tokens[self.i].text
            self.i += 1
            if self._peek() != "ASSIGN":
                self._fail("expected '='")
            self.i += 1
            value = self.expr()
            if self._peek() != "SEMI":
                self._fail("expected ';'")
            self.i += 1
            statements.append((name, value))
        if self._peek() != "RETURN":
            self._fail("expected 'return'")
        self.i += 1
        ret = self.expr()
        if self.i != len(self.tokens):
            self._fail("unexpected token after return expression")
        return Program(tuple(statements), ret)

    def expr(self) -> Expr:
        # Operator-precedence parse with explicit stacks.  Each open
        # parenthesis pushes a frame; a frame holds the operand/operator
        # stacks for one parenthesised sub-expression.
        frames: list[tuple[list[Expr], list[tuple[str, int]], int]] = [([], [], -1)]
        expect_operand = True
        while True:
            kind = self._peek()
            if expect_operand:
                tok = self.tokens[self.i] if kind is not None else None
                if kind == "INT_DIGIT":
                    frames[-1][0].append(Num(int(tok.text), self.i))
                elif kind == "IDENT":
                    frames[-1][0].append(Var(tok.text, self.i))
                elif kind == "LPAREN":
                    frames.append(([], [], self.i))
                    self.i += 1
                    continue
                else:
                    self._fail("expected digit, variable or '('")
                self.i += 1
                expect_operand = False
                continue

            if kind in _ADDITIVE or kind in _MULTIPLICATIVE:
                symbol = _OP_SYMBOL[kind]
                operands, operators, _ = frames[-1]
                while operators and _PRECEDENCE[operators[-1][0]] >= _PRECEDENCE[symbol]:
                    _reduce(operands, operators)
                operators.append((symbol, self.i))
                self.i += 1
                expect_operand = True
            elif kind == "RPAREN" and len(frames) > 1:
                operands, operators, _ = frames.pop()
                while operators:
                    _reduce(operands, operators)
                frames[-1][0].append(operands[0])
                self.i += 1
            else:
                if len(frames) > 1:
                    self._fail("expected ')'")
                operands, operators, _ = frames[0]
                while operators:
                    _reduce(operands, operators)
                return operands[0]


def _reduce(operands: list[Expr], operators: list[tuple[str, int]]) -> None:
    op, pos = operators.pop()
    right = operands.pop()
    left = operands.pop()
    operands.append(BinOp(op, left, right, pos))


def parse(tokens: list[Token], source_len: int | None = None) -> Program:
    """Parse a token list into a :class:`Program`.

    ``source_len`` is the offset reported when the input ends early; it
    defaults to the end of the last token.
    """
    if source_len is None:
        source_len = tokens[-1].offset + len(tokens[-1].text) if tokens else 0
    return _Parser(tokens, source_len).program()


def parse_source(source: str) -> Program:
    return parse(tokenize(source), len(source))


def _wrap(value: int) -> int:
    return (value - INT64_MIN) % 2**64 + INT64_MIN


def _apply(op: str, a: int, b: int, pos: int) -> int:
    if op == "+":
        return _wrap(a + b)
    if op == "-":
        return _wrap(a - b)
    if op == "*":
        return _wrap(a * b)
    if b == 0:
        raise ExecError("DivisionByZero", pos)
    quotient = abs(a) // abs(b)
    if (a < 0) != (b < 0):
        quotient = -quotient
    if op == "/":
        return _wrap(quotient)
    return _wrap(a - b * quotient)


def _evaluate(expr: Expr, env: dict[str, int], budget: list[int]) -> int:
    # Post-order walk with an explicit stack; one step per node visited.
    values: list[int] = []
    stack: list[tuple[Expr, bool]] = [(expr, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            right = values.pop()
            left = values.pop()
            values.append(_apply(node.op, left, right, node.pos))
            continue
        budget[0] -= 1
        if budget[0] < 0:
            raise ExecError("StepLimitExceeded", node.pos)
        if isinstance(node, Num):
            values.append(node.value)
        elif isinstance(node, Var):
            if node.name not in env:
                raise ExecError("UndefinedVariable", node.pos)
            values.append(env[node.name])
        else:
            stack.append((node, True))
            stack.append((node.right, False))
            stack.append((node.left, False))
    return values[0]


def execute(program: Program, input_n: int, step_limit: int = DEFAULT_STEP_LIMIT) -> int:
    """Run ``program`` with ``n`` bound to ``input_n``.

    Arithmetic wraps at 64 bits; ``/`` truncates toward zero and ``%`` takes
    the sign of the dividend.
    """
    if step_limit < 1:
        raise ValueError("step_limit must be >= 1")
    if not INT64_MIN <= input_n <= INT64_MAX:
        raise ValueError("input_n must fit in a signed 64-bit integer")
    env = {"n": int(input_n)}
    budget = [step_limit]
    for name, value in program.statements:
        env[name] = _evaluate(value, env, budget)
    return _evaluate(program.return_expr, env, budget)


def render_expr(expr: Expr) -> str:
    if isinstance(expr, Num):
        return str(expr.value)
    if isinstance(expr, Var):
        return expr.name
    prec = _PRECEDENCE[expr.op]
    left = render_expr(expr.left)
    right = render_expr(expr.right)
    if isinstance(expr.left, BinOp) and _PRECEDENCE[expr.left.op] < prec:
        left = f"( {left} )"
    # Operators are left-associative, so an equal-precedence right child
    # needs explicit grouping.
    if isinstance(expr.right, BinOp) and _PRECEDENCE[expr.right.op] <= prec:
        right = f"( {right} )"
    return f"{left} {expr.op} {right}"


def render(program: Program) -> str:
    """Canonical single-space-separated text of ``program``."""
    parts = [f"{name} = {render_expr(value)} ;" for name, value in program.statements]
    parts.append(f"return {render_expr(program.return_expr)}")
    return " ".join(parts)
