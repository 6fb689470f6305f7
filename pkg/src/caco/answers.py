"""Boxed-answer extraction, answer parsing, and tolerance-based equivalence."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

DEFAULT_REL_TOL = 1e-6


class AnswerError(ValueError):
    pass


class NoBoxedAnswer(AnswerError):
    pass


class EmptyOutput(AnswerError):
    pass


class Variant(str, Enum):
    INTEGER = "integer"
    RATIONAL = "rational"
    DECIMAL = "decimal"
    SYMBOLIC = "symbolic"
    LITERAL = "literal"


# --- expression tree over {+, -, *, /, ^, sqrt, pi, numerals} -----------------


@dataclass(frozen=True)
class Num:
    text: str

    def value(self) -> Fraction:
        return Fraction(self.text)


@dataclass(frozen=True)
class Pi:
    pass


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "sqrt"
    arg: object


@dataclass(frozen=True)
class Binary:
    op: str  # one of + - * / ^
    left: object
    right: object


def eval_expr(node: object) -> float:
    if isinstance(node, Num):
        return float(node.value())
    if isinstance(node, Pi):
        return math.pi
    if isinstance(node, Unary):
        arg = eval_expr(node.arg)
        if node.op == "-":
            return -arg
        if node.op == "sqrt":
            if arg < 0:
                raise ValueError("sqrt of negative value")
            return math.sqrt(arg)
        raise ValueError(f"unknown unary op {node.op!r}")
    if isinstance(node, Binary):
        left, right = eval_expr(node.left), eval_expr(node.right)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if node.op == "/":
            if right == 0:
                raise ZeroDivisionError("division by zero in expression")
            return left / right
        if node.op == "^":
            result = left**right
            if isinstance(result, complex):
                raise ValueError("complex power result")
            return float(result)
        raise ValueError(f"unknown binary op {node.op!r}")
    raise ValueError(f"unknown node {node!r}")


def render_expr(node: object) -> str:
    if isinstance(node, Num):
        return node.text
    if isinstance(node, Pi):
        return "pi"
    if isinstance(node, Unary):
        if node.op == "-":
            return f"(-{render_expr(node.arg)})"
        return f"sqrt({render_expr(node.arg)})"
    if isinstance(node, Binary):
        return f"({render_expr(node.left)}{node.op}{render_expr(node.right)})"
    raise ValueError(f"unknown node {node!r}")


_TOKEN_RE = re.compile(
    r"(?P<num>\d+\.\d*|\.\d+|\d+)"
    r"|(?P<name>\\?[A-Za-z]+)"
    r"|(?P<sym>\*\*|[+\-*/^(){}]|[×÷·√])"
    r"|(?P<ws>\s+)"
)

_NAME_MAP = {
    "pi": "pi",
    r"\pi": "pi",
    "sqrt": "sqrt",
    r"\sqrt": "sqrt",
    "√": "sqrt",
    "frac": "frac",
    r"\frac": "frac",
    r"\dfrac": "frac",
    r"\tfrac": "frac",
    r"\cdot": "*",
    r"\times": "*",
    r"\div": "/",
}

_SYM_MAP = {"**": "^", "×": "*", "·": "*", "÷": "/"}


def _tokenize(text: str) -> list[str] | None:
    tokens: list[str] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            return None
        pos = m.end()
        if m.lastgroup == "ws":
            continue
        if m.lastgroup == "num":
            tokens.append(m.group())
        elif m.lastgroup == "name":
            mapped = _NAME_MAP.get(m.group())
            if mapped is None:
                return None
            tokens.append(mapped)
        else:
            sym = m.group()
            if sym == "√":
                tokens.append("sqrt")
            else:
                tokens.append(_SYM_MAP.get(sym, sym))
    return tokens


class _ExprParser:
    def __init__(self, tokens: list[str]):
        self.tokens = tokens
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def expect(self, token: str) -> None:
        if self.peek() != token:
            raise ValueError(f"expected {token!r}")
        self.take()

    def parse(self) -> object:
        node = self.expr()
        if self.pos != len(self.tokens):
            raise ValueError("trailing tokens")
        return node

    def expr(self) -> object:
        node = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            node = Binary(op, node, self.term())
        return node

    def term(self) -> object:
        node = self.factor()
        while True:
            token = self.peek()
            if token in ("*", "/"):
                op = self.take()
                node = Binary(op, node, self.factor())
            elif token in ("sqrt", "pi", "frac", "(", "{"):
                # Juxtaposition such as 3sqrt(3), 2pi, or 3(1+2) multiplies.
                node = Binary("*", node, self.factor())
            else:
                return node

    def factor(self) -> object:
        node = self.atom()
        if self.peek() == "^":
            self.take()
            return Binary("^", node, self.factor())
        return node

    def atom(self) -> object:
        token = self.peek()
        if token is None:
            raise ValueError("unexpected end of expression")
        if token == "-":
            self.take()
            return Unary("-", self.atom())
        if token == "+":
            self.take()
            return self.atom()
        if token == "(":
            self.take()
            node = self.expr()
            self.expect(")")
            return node
        if token == "{":
            self.take()
            node = self.expr()
            self.expect("}")
            return node
        if token == "pi":
            self.take()
            return Pi()
        if token == "sqrt":
            self.take()
            return Unary("sqrt", self.sqrt_arg())
        if token == "frac":
            self.take()
            self.expect("{")
            numerator = self.expr()
            self.expect("}")
            self.expect("{")
            denominator = self.expr()
            self.expect("}")
            return Binary("/", numerator, denominator)
        self.take()
        if not re.fullmatch(r"\d+\.\d*|\.\d+|\d+", token):
            raise ValueError(f"unexpected token {token!r}")
        return Num(token)

    def sqrt_arg(self) -> object:
        token = self.peek()
        if token in ("(", "{"):
            return self.atom()
        if token == "sqrt":
            self.take()
            return Unary("sqrt", self.sqrt_arg())
        if token is not None and re.fullmatch(r"\d+\.\d*|\.\d+|\d+", token):
            return Num(self.take())
        if token == "pi":
            self.take()
            return Pi()
        raise ValueError("sqrt argument missing")


# --- answer form ---------------------------------------------------------------


@dataclass(frozen=True)
class AnswerForm:
    variant: Variant
    value: object
    raw: str = field(default="", compare=False)

    def numeric(self) -> Fraction | float | None:
        if self.variant is Variant.INTEGER:
            return Fraction(self.value)
        if self.variant is Variant.RATIONAL:
            return self.value
        if self.variant is Variant.DECIMAL:
            return self.value
        if self.variant is Variant.SYMBOLIC:
            return eval_expr(self.value)
        return None

    @classmethod
    def integer(cls, value: int, raw: str = "") -> "AnswerForm":
        return cls(Variant.INTEGER, int(value), raw or str(value))

    @classmethod
    def rational(cls, value: Fraction, raw: str = "") -> "AnswerForm":
        return cls(Variant.RATIONAL, value, raw or f"{value.numerator}/{value.denominator}")

    @classmethod
    def decimal(cls, value: float, raw: str = "") -> "AnswerForm":
        return cls(Variant.DECIMAL, float(value), raw or repr(float(value)))

    @classmethod
    def symbolic(cls, expr: object, raw: str = "") -> "AnswerForm":
        return cls(Variant.SYMBOLIC, expr, raw or render_expr(expr))

    @classmethod
    def literal(cls, text: str, raw: str = "") -> "AnswerForm":
        return cls(Variant.LITERAL, text, raw or text)


def extract_boxed(text: str) -> str:
    """Contents of the last balanced \\boxed{...}; nested braces kept verbatim."""
    for m in reversed(list(re.finditer(r"\\boxed\s*\{", text))):
        depth = 1
        for i in range(m.end(), len(text)):
            ch = text[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[m.end() : i].strip()
    raise NoBoxedAnswer("no balanced \\boxed{...} in text")


_MATH_WRAPPERS = (("$$", "$$"), ("$", "$"), (r"\(", r"\)"), (r"\[", r"\]"))
_SPACING_RE = re.compile(r"\\left|\\right|\\(?:,|;|!|quad|qquad|\s)")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d{3}(?!\d))")
_INT_RE = re.compile(r"[+-]?\d+")
_RAT_SLASH_RE = re.compile(r"([+-]?\d+)\s*/\s*([+-]?\d+)")
_RAT_FRAC_RE = re.compile(r"([+-]?)\\[dt]?frac\s*\{\s*([+-]?\d+)\s*\}\s*\{\s*([+-]?\d+)\s*\}")
_DEC_RE = re.compile(r"[+-]?(?:\d+\.\d*|\.\d+)(?:[eE][+-]?\d+)?|[+-]?\d+[eE][+-]?\d+")


def _spans_whole(text: str, open_ch: str, close_ch: str) -> bool:
    """True when the leading delimiter closes exactly at the final character."""
    depth = 0
    for i, ch in enumerate(text):
        if ch == open_ch:
            depth += 1
        elif ch == close_ch:
            depth -= 1
            if depth == 0 and i != len(text) - 1:
                return False
            if depth < 0:
                return False
    return depth == 0


def _strip_wrappers(text: str) -> str:
    s = _SPACING_RE.sub(" ", text.strip()).strip()
    changed = True
    while changed:
        changed = False
        for open_w, close_w in _MATH_WRAPPERS:
            if s.startswith(open_w) and s.endswith(close_w) and len(s) > len(open_w) + len(close_w):
                s = s[len(open_w) : -len(close_w)].strip()
                changed = True
        for open_ch, close_ch in (("{", "}"), ("(", ")")):
            if (
                s.startswith(open_ch)
                and s.endswith(close_ch)
                and len(s) > 2
                and _spans_whole(s, open_ch, close_ch)
            ):
                s = s[1:-1].strip()
                changed = True
    s = _THOUSANDS_RE.sub("", s)
    return s.strip()


def parse_answer(text: str) -> AnswerForm:
    """Parse answer text, trying integer, rational, decimal, symbolic, then literal."""
    s = _strip_wrappers(text)
    if _INT_RE.fullmatch(s):
        return AnswerForm(Variant.INTEGER, int(s), text)
    m = _RAT_SLASH_RE.fullmatch(s) or _RAT_FRAC_RE.fullmatch(s)
    if m:
        groups = m.groups()
        if len(groups) == 3:
            sign = -1 if groups[0] == "-" else 1
            numerator, denominator = sign * int(groups[1]), int(groups[2])
        else:
            numerator, denominator = int(groups[0]), int(groups[1])
        if denominator != 0:
            return AnswerForm(Variant.RATIONAL, Fraction(numerator, denominator), text)
    if _DEC_RE.fullmatch(s):
        value = float(s)
        if math.isfinite(value):
            return AnswerForm(Variant.DECIMAL, value, text)
    tokens = _tokenize(s)
    if tokens:
        try:
            expr = _ExprParser(tokens).parse()
            value = eval_expr(expr)
            if math.isfinite(value):
                return AnswerForm(Variant.SYMBOLIC, expr, text)
        except (ValueError, ZeroDivisionError, OverflowError):
            pass
    return AnswerForm(Variant.LITERAL, s, text)


def render(form: AnswerForm) -> str:
    """Canonical text for a form; parse_answer(render(f)) reproduces every numeric f."""
    if form.variant is Variant.INTEGER:
        return str(form.value)
    if form.variant is Variant.RATIONAL:
        return f"{form.value.numerator}/{form.value.denominator}"
    if form.variant is Variant.DECIMAL:
        return repr(form.value)
    if form.variant is Variant.SYMBOLIC:
        return render_expr(form.value)
    return str(form.value)


def normalize_stdout(stdout: str) -> AnswerForm:
    """Parse the last non-empty stdout line as an answer."""
    for line in reversed(stdout.splitlines()):
        if line.strip():
            return parse_answer(line.strip())
    raise EmptyOutput("stdout holds no non-empty line")


def _collapse(text: str) -> str:
    return " ".join(text.lower().split())


def _close(x: Fraction | float, y: Fraction | float, rel_tol: float) -> bool:
    if isinstance(x, Fraction) or isinstance(y, Fraction):
        try:
            fx = x if isinstance(x, Fraction) else Fraction(x)
            fy = y if isinstance(y, Fraction) else Fraction(y)
        except (OverflowError, ValueError):
            return False
        tol = Fraction(rel_tol)
        return abs(fx - fy) <= tol * max(Fraction(1), abs(fx), abs(fy))
    if not (math.isfinite(x) and math.isfinite(y)):
        return x == y
    return abs(x - y) <= rel_tol * max(1.0, abs(x), abs(y))


def answers_match(a: AnswerForm, b: AnswerForm, rel_tol: float = DEFAULT_REL_TOL) -> bool:
    """Numeric forms match within rel_tol * max(1, |x|, |y|); literals match loosely on text."""
    try:
        x, y = a.numeric(), b.numeric()
    except (ValueError, ZeroDivisionError, OverflowError):
        return False
    if x is not None and y is not None:
        return _close(x, y, rel_tol)
    if x is None and y is None:
        return _collapse(str(a.value)) == _collapse(str(b.value))
    numeric_value = x if x is not None else y
    literal_form = a if x is None else b
    reparsed = parse_answer(str(literal_form.value))
    try:
        reparsed_value = reparsed.numeric()
    except (ValueError, ZeroDivisionError, OverflowError):
        return False
    if reparsed_value is None:
        return False
    return _close(numeric_value, reparsed_value, rel_tol)
