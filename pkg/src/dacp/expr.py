"""Predicate and map-expression grammar, validation, and evaluation.

Predicate grammar (precedence low to high: OR, AND, NOT, comparison):

    predicate  := or_expr
    or_expr    := and_expr { OR and_expr }
    and_expr   := not_expr { AND not_expr }
    not_expr   := NOT not_expr | comparison | '(' or_expr ')'
    comparison := ident op literal
    op         := '=' | '!=' | '<' | '<=' | '>' | '>='
    literal    := ['-'] integer | ['-'] decimal | string | 'true' | 'false'
    string     := "'" chars "'"         ('' escapes an embedded quote)
    ident      := [A-Za-z_][A-Za-z0-9_]*

Map expressions are arithmetic over numeric columns:

    expr   := term { ('+' | '-') term }
    term   := factor { ('*' | '/') factor }
    factor := ident | number | '-' number | '(' expr ')'

Keywords are case-insensitive; canonical printing uses upper-case AND/OR/NOT
and lower-case true/false. Nulls use two-valued logic: any comparison
involving a null cell is false (so NOT over it is true). Arithmetic over a
null operand yields null; Int64 arithmetic wraps to 64 bits; division of
two integers by zero yields null while float division by zero follows IEEE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Union

from dacp.errors import BadRequestError, DacpTypeError
from dacp.sdf import INT64_MAX, INT64_MIN, DataType, Schema

COMPARISON_OPS = ("=", "!=", "<", "<=", ">", ">=")


# ---------------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class Comparison:
    column: str
    op: str
    literal: Union[bool, int, float, str]


@dataclass(frozen=True)
class And:
    left: "Predicate"
    right: "Predicate"


@dataclass(frozen=True)
class Or:
    left: "Predicate"
    right: "Predicate"


@dataclass(frozen=True)
class Not:
    operand: "Predicate"


Predicate = Union[Comparison, And, Or, Not]


@dataclass(frozen=True)
class ColRef:
    name: str


@dataclass(frozen=True)
class NumLit:
    value: Union[int, float]


@dataclass(frozen=True)
class BinOp:
    op: str  # + - * /
    left: "MapExpr"
    right: "MapExpr"


MapExpr = Union[ColRef, NumLit, BinOp]


# ---------------------------------------------------------------------------
# tokenizer


_IDENT_START = set("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ_")
_IDENT_CONT = _IDENT_START | set("0123456789")
_KEYWORDS = {"and", "or", "not", "true", "false"}


@dataclass(frozen=True)
class _Token:
    kind: str  # IDENT NUMBER STRING OP PUNCT KEYWORD EOF
    value: Any
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c in " \t\r\n":
            i += 1
            continue
        start = i
        if c in _IDENT_START:
            i += 1
            while i < n and text[i] in _IDENT_CONT:
                i += 1
            word = text[start:i]
            low = word.lower()
            if low in _KEYWORDS:
                tokens.append(_Token("KEYWORD", low, start))
            else:
                tokens.append(_Token("IDENT", word, start))
            continue
        if c.isdigit() or (c == "." and i + 1 < n and text[i + 1].isdigit()):
            i, tok = _scan_number(text, i)
            tokens.append(tok)
            continue
        if c == "'":
            i, tok = _scan_string(text, i)
            tokens.append(tok)
            continue
        if c in "()+-*/":
            tokens.append(_Token("PUNCT", c, start))
            i += 1
            continue
        if c in "=<>!":
            if text[i : i + 2] in ("<=", ">=", "!="):
                tokens.append(_Token("OP", text[i : i + 2], start))
                i += 2
            elif c in "=<>":
                tokens.append(_Token("OP", c, start))
                i += 1
            else:
                raise BadRequestError(f"parse error at byte {start}: bare '!'")
            continue
        raise BadRequestError(f"parse error at byte {start}: unexpected character {c!r}")
    tokens.append(_Token("EOF", None, n))
    return tokens


def _scan_number(text: str, i: int) -> tuple[int, _Token]:
    start = i
    n = len(text)
    while i < n and text[i].isdigit():
        i += 1
    is_float = False
    if i < n and text[i] == ".":
        is_float = True
        i += 1
        while i < n and text[i].isdigit():
            i += 1
    if i < n and text[i] in "eE":
        j = i + 1
        if j < n and text[j] in "+-":
            j += 1
        if j < n and text[j].isdigit():
            is_float = True
            i = j
            while i < n and text[i].isdigit():
                i += 1
    word = text[start:i]
    try:
        value: Union[int, float] = float(word) if is_float else int(word)
    except ValueError:
        raise BadRequestError(f"parse error at byte {start}: bad number {word!r}") from None
    return i, _Token("NUMBER", value, start)


def _scan_string(text: str, i: int) -> tuple[int, _Token]:
    start = i
    i += 1
    out = []
    n = len(text)
    while i < n:
        c = text[i]
        if c == "'":
            if i + 1 < n and text[i + 1] == "'":
                out.append("'")
                i += 2
                continue
            return i + 1, _Token("STRING", "".join(out), start)
        out.append(c)
        i += 1
    raise BadRequestError(f"parse error at byte {start}: unterminated string")


class _TokenCursor:
    def __init__(self, tokens: list[_Token]):
        self.tokens = tokens
        self.i = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect_punct(self, ch: str) -> None:
        tok = self.cur
        if tok.kind != "PUNCT" or tok.value != ch:
            raise BadRequestError(f"parse error at byte {tok.pos}: expected {ch!r}")
        self.advance()

    def fail(self, what: str) -> BadRequestError:
        return BadRequestError(f"parse error at byte {self.cur.pos}: expected {what}")


# ---------------------------------------------------------------------------
# predicate parser


def parse_predicate(text: str) -> Predicate:
    cur = _TokenCursor(_tokenize(text))
    pred = _parse_or(cur)
    if cur.cur.kind != "EOF":
        raise BadRequestError(f"parse error at byte {cur.cur.pos}: trailing input")
    return pred


def _parse_or(cur: _TokenCursor) -> Predicate:
    left = _parse_and(cur)
    while cur.cur.kind == "KEYWORD" and cur.cur.value == "or":
        cur.advance()
        left = Or(left, _parse_and(cur))
    return left


def _parse_and(cur: _TokenCursor) -> Predicate:
    left = _parse_not(cur)
    while cur.cur.kind == "KEYWORD" and cur.cur.value == "and":
        cur.advance()
        left = And(left, _parse_not(cur))
    return left


def _parse_not(cur: _TokenCursor) -> Predicate:
    tok = cur.cur
    if tok.kind == "KEYWORD" and tok.value == "not":
        cur.advance()
        return Not(_parse_not(cur))
    if tok.kind == "PUNCT" and tok.value == "(":
        cur.advance()
        inner = _parse_or(cur)
        cur.expect_punct(")")
        return inner
    return _parse_comparison(cur)


def _parse_comparison(cur: _TokenCursor) -> Comparison:
    tok = cur.cur
    if tok.kind != "IDENT":
        raise cur.fail("column name")
    cur.advance()
    op_tok = cur.cur
    if op_tok.kind != "OP" or op_tok.value not in COMPARISON_OPS:
        raise cur.fail("comparison operator")
    cur.advance()
    lit = _parse_literal(cur)
    return Comparison(tok.value, op_tok.value, lit)


def _parse_literal(cur: _TokenCursor) -> Union[bool, int, float, str]:
    tok = cur.cur
    if tok.kind == "NUMBER":
        cur.advance()
        return tok.value
    if tok.kind == "PUNCT" and tok.value == "-":
        cur.advance()
        num = cur.cur
        if num.kind != "NUMBER":
            raise cur.fail("number after '-'")
        cur.advance()
        return -num.value
    if tok.kind == "STRING":
        cur.advance()
        return tok.value
    if tok.kind == "KEYWORD" and tok.value in ("true", "false"):
        cur.advance()
        return tok.value == "true"
    raise cur.fail("literal")


# ---------------------------------------------------------------------------
# map expression parser


def parse_map_expr(text: str) -> MapExpr:
    cur = _TokenCursor(_tokenize(text))
    expr = _parse_sum(cur)
    if cur.cur.kind != "EOF":
        raise BadRequestError(f"parse error at byte {cur.cur.pos}: trailing input")
    return expr


def _parse_sum(cur: _TokenCursor) -> MapExpr:
    left = _parse_term(cur)
    while cur.cur.kind == "PUNCT" and cur.cur.value in "+-":
        op = cur.advance().value
        left = BinOp(op, left, _parse_term(cur))
    return left


def _parse_term(cur: _TokenCursor) -> MapExpr:
    left = _parse_factor(cur)
    while cur.cur.kind == "PUNCT" and cur.cur.value in "*/":
        op = cur.advance().value
        left = BinOp(op, left, _parse_factor(cur))
    return left


def _parse_factor(cur: _TokenCursor) -> MapExpr:
    tok = cur.cur
    if tok.kind == "IDENT":
        cur.advance()
        return ColRef(tok.value)
    if tok.kind == "NUMBER":
        cur.advance()
        return NumLit(tok.value)
    if tok.kind == "PUNCT" and tok.value == "-":
        cur.advance()
        num = cur.cur
        if num.kind != "NUMBER":
            raise cur.fail("number after '-'")
        cur.advance()
        return NumLit(-num.value)
    if tok.kind == "PUNCT" and tok.value == "(":
        cur.advance()
        inner = _parse_sum(cur)
        cur.expect_punct(")")
        return inner
    raise cur.fail("column, number, or '('")


# ---------------------------------------------------------------------------
# canonical printing


def _fmt_literal(v: Union[bool, int, float, str]) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        text = repr(v)
        return text if ("." in text or "e" in text or "E" in text) else text + ".0"
    return "'" + v.replace("'", "''") + "'"


def predicate_to_text(pred: Predicate) -> str:
    """Canonical text form; parse_predicate round-trips it."""
    return _print_pred(pred, 0)


def _pred_prec(pred: Predicate) -> int:
    if isinstance(pred, Or):
        return 1
    if isinstance(pred, And):
        return 2
    if isinstance(pred, Not):
        return 3
    return 4


def _print_pred(pred: Predicate, parent_prec: int) -> str:
    prec = _pred_prec(pred)
    if isinstance(pred, Comparison):
        text = f"{pred.column} {pred.op} {_fmt_literal(pred.literal)}"
    elif isinstance(pred, Not):
        text = f"NOT {_print_pred(pred.operand, prec)}"
    else:
        word = "OR" if isinstance(pred, Or) else "AND"
        # right operand gets prec+1 so same-precedence right nesting keeps parens
        text = f"{_print_pred(pred.left, prec)} {word} {_print_pred(pred.right, prec + 1)}"
    if prec < parent_prec:
        return f"({text})"
    return text


def map_expr_to_text(expr: MapExpr) -> str:
    return _print_expr(expr, 0)


def _expr_prec(expr: MapExpr) -> int:
    if isinstance(expr, BinOp):
        return 1 if expr.op in "+-" else 2
    return 3


def _print_expr(expr: MapExpr, parent_prec: int) -> str:
    prec = _expr_prec(expr)
    if isinstance(expr, ColRef):
        return expr.name
    if isinstance(expr, NumLit):
        text = _fmt_literal(expr.value)
        if expr.value < 0 and parent_prec > 0:
            return f"({text})"
        return text
    text = f"{_print_expr(expr.left, prec)} {expr.op} {_print_expr(expr.right, prec + 1)}"
    if prec < parent_prec:
        return f"({text})"
    return text


# ---------------------------------------------------------------------------
# column references


def predicate_columns(pred: Predicate) -> list[str]:
    """Referenced column names in first-use order."""
    out: list[str] = []
    _collect_pred_cols(pred, out)
    return out


def _collect_pred_cols(pred: Predicate, out: list[str]) -> None:
    if isinstance(pred, Comparison):
        if pred.column not in out:
            out.append(pred.column)
    elif isinstance(pred, Not):
        _collect_pred_cols(pred.operand, out)
    else:
        _collect_pred_cols(pred.left, out)
        _collect_pred_cols(pred.right, out)


def map_expr_columns(expr: MapExpr) -> list[str]:
    out: list[str] = []
    _collect_expr_cols(expr, out)
    return out


def _collect_expr_cols(expr: MapExpr, out: list[str]) -> None:
    if isinstance(expr, ColRef):
        if expr.name not in out:
            out.append(expr.name)
    elif isinstance(expr, BinOp):
        _collect_expr_cols(expr.left, out)
        _collect_expr_cols(expr.right, out)


# ---------------------------------------------------------------------------
# validation and compilation


def _literal_kind(v: Union[bool, int, float, str]) -> str:
    if isinstance(v, bool):
        return "bool"
    if isinstance(v, (int, float)):
        return "numeric"
    return "text"


def _column_kind(dtype: DataType) -> Optional[str]:
    if dtype == DataType.BOOL:
        return "bool"
    if dtype.is_numeric:
        return "numeric"
    if dtype == DataType.UTF8:
        return "text"
    return None  # Binary/BlobRef are not comparable


def compile_predicate(pred: Predicate, schema: Schema) -> Callable[[list], bool]:
    """Validate a predicate against a schema and compile it to a row
    evaluator over row lists. Raises DacpTypeError on invalid references."""
    if isinstance(pred, Comparison):
        if pred.column not in schema:
            raise DacpTypeError(f"predicate references unknown column {pred.column!r}")
        field = schema.field(pred.column)
        col_kind = _column_kind(field.dtype)
        lit_kind = _literal_kind(pred.literal)
        if col_kind is None:
            raise DacpTypeError(
                f"column {pred.column!r} of type {field.dtype.name} is not comparable"
            )
        if col_kind != lit_kind:
            raise DacpTypeError(
                f"cannot compare column {pred.column!r} ({col_kind}) "
                f"with a {lit_kind} literal"
            )
        idx = schema.index(pred.column)
        lit = pred.literal
        cmp = _CMP_FUNCS[pred.op]
        return lambda row: row[idx] is not None and cmp(row[idx], lit)
    if isinstance(pred, Not):
        inner = compile_predicate(pred.operand, schema)
        return lambda row: not inner(row)
    if isinstance(pred, And):
        lf = compile_predicate(pred.left, schema)
        rf = compile_predicate(pred.right, schema)
        return lambda row: lf(row) and rf(row)
    lf = compile_predicate(pred.left, schema)
    rf = compile_predicate(pred.right, schema)
    return lambda row: lf(row) or rf(row)


_CMP_FUNCS: dict[str, Callable[[Any, Any], bool]] = {
    "=": lambda a, b: a == b,
    "!=": lambda a, b: a != b,
    "<": lambda a, b: a < b,
    "<=": lambda a, b: a <= b,
    ">": lambda a, b: a > b,
    ">=": lambda a, b: a >= b,
}


def validate_predicate(pred: Predicate, schema: Schema) -> None:
    compile_predicate(pred, schema)


def wrap_i64(v: int) -> int:
    """Wrap an unbounded int to signed 64-bit two's complement."""
    v &= (1 << 64) - 1
    return v - (1 << 64) if v > INT64_MAX else v


def infer_map_expr_type(expr: MapExpr, schema: Schema) -> DataType:
    """Static result type: Float64 if any operand is a float column or a
    float literal, or any division occurs; else Int64."""
    has_float = _expr_has_float(expr, schema)
    return DataType.FLOAT64 if has_float else DataType.INT64


def _expr_has_float(expr: MapExpr, schema: Schema) -> bool:
    if isinstance(expr, ColRef):
        if expr.name not in schema:
            raise DacpTypeError(f"expression references unknown column {expr.name!r}")
        dtype = schema.field(expr.name).dtype
        if not dtype.is_numeric:
            raise DacpTypeError(
                f"expression column {expr.name!r} has non-numeric type {dtype.name}"
            )
        return dtype.is_float
    if isinstance(expr, NumLit):
        return isinstance(expr.value, float)
    left = _expr_has_float(expr.left, schema)
    right = _expr_has_float(expr.right, schema)
    return expr.op == "/" or left or right


def compile_map_expr(expr: MapExpr, schema: Schema) -> Callable[[list], Any]:
    """Validate and compile a map expression to a per-row evaluator.

    The evaluator returns None when any referenced cell is null or when two
    integers are divided by zero; otherwise ints (wrapped to 64 bits) or
    floats per the static result type.
    """
    result_type = infer_map_expr_type(expr, schema)
    fn = _compile_expr(expr, schema)
    if result_type == DataType.FLOAT64:

        def eval_float(row: list) -> Any:
            v = fn(row)
            return None if v is None else float(v)

        return eval_float
    return fn


def _compile_expr(expr: MapExpr, schema: Schema) -> Callable[[list], Any]:
    if isinstance(expr, ColRef):
        idx = schema.index(expr.name)
        return lambda row: row[idx]
    if isinstance(expr, NumLit):
        v = expr.value
        return lambda row: v
    lf = _compile_expr(expr.left, schema)
    rf = _compile_expr(expr.right, schema)
    op = expr.op
    if op == "/":

        def div(row: list) -> Any:
            a = lf(row)
            b = rf(row)
            if a is None or b is None:
                return None
            if isinstance(a, int) and isinstance(b, int):
                return None if b == 0 else a / b
            return _ieee_div(float(a), float(b))

        return div

    def arith(row: list) -> Any:
        a = lf(row)
        b = rf(row)
        if a is None or b is None:
            return None
        if op == "+":
            r = a + b
        elif op == "-":
            r = a - b
        else:
            r = a * b
        if isinstance(r, int):
            return wrap_i64(r)
        return r

    return arith


def _ieee_div(a: float, b: float) -> float:
    if b == 0.0:
        if a == 0.0 or math.isnan(a):
            return math.nan
        sign = math.copysign(1.0, a) * math.copysign(1.0, b)
        return math.copysign(math.inf, sign)
    return a / b
