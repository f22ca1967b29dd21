"""Model formula parsing and manipulation.

Supports a strict subset of Wilkinson notation: ``y ~ 1 + a + b + a:b +
(1 + a | subj) + (1 + b || item)``.  ``*`` crosses terms (``a*b`` expands
to ``a + b + a:b``), ``0`` suppresses the intercept, ``|`` introduces a
grouping factor and ``||`` marks the term's components as uncorrelated.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, replace


class FormulaError(ValueError):
    """Raised on malformed formulas; carries the offending position."""

    def __init__(self, message: str, text: str = "", position: int = -1):
        super().__init__(message)
        self.message = message
        self.text = text
        self.position = position

    def pointer(self) -> str:
        """Two-line rendering with a caret under the error position."""
        if self.position < 0:
            return self.message
        return f"{self.message}\n  {self.text}\n  {' ' * self.position}^"


@dataclass(frozen=True)
class Term:
    """One fixed or random effect: a product of factor/covariate names.

    The empty product is the intercept.
    """

    factors: tuple[str, ...] = ()

    @property
    def is_intercept(self) -> bool:
        return not self.factors

    @property
    def order(self) -> int:
        """Interaction order; 0 for the intercept, 1 for main effects."""
        return len(self.factors)

    def contains(self, other: "Term") -> bool:
        """True if ``other``'s factors are a proper subset of this term's."""
        return set(other.factors) < set(self.factors)

    def __str__(self) -> str:
        return "1" if self.is_intercept else ":".join(self.factors)


INTERCEPT = Term(())


@dataclass(frozen=True)
class RandomTerm:
    """A parenthesized random-effects term ``(terms | group)``."""

    terms: tuple[Term, ...]
    group: str
    correlated: bool = True

    @property
    def has_intercept(self) -> bool:
        return any(t.is_intercept for t in self.terms)

    def __str__(self) -> str:
        bar = "|" if self.correlated else "||"
        return f"({_format_terms(self.terms)} {bar} {self.group})"


@dataclass(frozen=True)
class Formula:
    """Parsed model formula: response, fixed terms, random terms."""

    response: str
    fixed: tuple[Term, ...] = (INTERCEPT,)
    random: tuple[RandomTerm, ...] = ()

    @property
    def has_intercept(self) -> bool:
        return any(t.is_intercept for t in self.fixed)

    def variable_names(self) -> list[str]:
        """All data column names the formula references, response first."""
        seen: dict[str, None] = {self.response: None}
        for t in self.fixed:
            for name in t.factors:
                seen.setdefault(name, None)
        for rt in self.random:
            for t in rt.terms:
                for name in t.factors:
                    seen.setdefault(name, None)
            seen.setdefault(rt.group, None)
        return list(seen)

    def __str__(self) -> str:
        return format_formula(self)


# ---------------------------------------------------------------------------
# Tokenizer
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<num>[01])"
    r"|(?P<dblbar>\|\|)|(?P<op>[~+:*|()]))"
)


@dataclass(frozen=True)
class _Token:
    kind: str  # name | num | op | end
    value: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    i = 0
    while i < len(text):
        if not text[i:].strip():
            break
        m = _TOKEN_RE.match(text, i)
        if m is None:
            stripped = text[i:].lstrip()
            pos = len(text) - len(stripped)
            raise FormulaError(f"unexpected character {text[pos]!r}", text, pos)
        pos = m.end() - len(m.group().lstrip())
        if m.group("name"):
            tokens.append(_Token("name", m.group("name"), pos))
        elif m.group("num"):
            tokens.append(_Token("num", m.group("num"), pos))
        elif m.group("dblbar"):
            tokens.append(_Token("op", "||", pos))
        else:
            tokens.append(_Token("op", m.group("op"), pos))
        i = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str) -> _Token:
        tok = self.next()
        if tok.kind == "end":
            raise FormulaError(f"expected {value!r}, found end of formula", self.text, tok.pos)
        if tok.value != value:
            raise FormulaError(f"expected {value!r}, found {tok.value!r}", self.text, tok.pos)
        return tok

    def error(self, message: str, tok: _Token | None = None) -> FormulaError:
        tok = tok or self.peek()
        return FormulaError(message, self.text, tok.pos)

    # -- grammar -----------------------------------------------------------

    def parse(self) -> Formula:
        resp = self.next()
        if resp.kind != "name":
            raise self.error("formula must start with a response column name", resp)
        self.expect("~")
        fixed, random = self.parse_rhs()
        if self.peek().kind != "end":
            raise self.error(f"unexpected {self.peek().value!r}")
        return Formula(response=resp.value, fixed=tuple(fixed), random=tuple(random))

    def parse_rhs(self) -> tuple[list[Term], list[RandomTerm]]:
        collector = _TermCollector()
        random: list[RandomTerm] = []
        while True:
            if self.peek().value == "(":
                rt = self.parse_random_term()
                for prev in random:
                    if prev.terms == rt.terms and prev.group == rt.group:
                        raise self.error(
                            f"duplicate random term for grouping factor {rt.group!r}"
                        )
                random.append(rt)
            else:
                collector.add(self.parse_product())
            if self.peek().value == "+":
                self.next()
                continue
            break
        return collector.terms(), random

    def parse_random_term(self) -> RandomTerm:
        open_tok = self.expect("(")
        collector = _TermCollector()
        while True:
            if self.peek().value == "(":
                raise self.error("nested parentheses are not supported")
            collector.add(self.parse_product())
            if self.peek().value == "+":
                self.next()
                continue
            break
        bar = self.next()
        if bar.value not in ("|", "||"):
            raise FormulaError(
                "expected '|' or '||' inside parenthesized random term",
                self.text,
                bar.pos if bar.kind != "end" else open_tok.pos,
            )
        group = self.next()
        if group.kind != "name":
            raise FormulaError("expected grouping factor name", self.text, group.pos)
        self.expect(")")
        terms = collector.terms()
        if not terms:
            raise FormulaError(
                "random term has no components", self.text, open_tok.pos
            )
        return RandomTerm(tuple(terms), group.value, correlated=(bar.value == "|"))

    def parse_product(self) -> list[Term | None]:
        """Parse a '+'-free chunk; returns terms, with None marking '0'."""
        terms = [self.parse_interaction()]
        while self.peek().value == "*":
            star = self.next()
            right = self.parse_interaction()
            if terms[-1] is None or right is None:
                raise FormulaError("'0' cannot appear in a product", self.text, star.pos)
            expanded: list[Term | None] = []
            for left in terms:
                expanded.append(left)
            if right not in expanded:
                expanded.append(right)
            for left in terms:
                assert left is not None and right is not None
                crossed = _cross(left, right)
                if crossed not in expanded:
                    expanded.append(crossed)
            terms = expanded
        return terms

    def parse_interaction(self) -> Term | None:
        tok = self.next()
        if tok.kind == "num":
            if self.peek().value == ":":
                raise self.error("'0' and '1' cannot enter interactions")
            return INTERCEPT if tok.value == "1" else None
        if tok.kind != "name":
            shown = repr(tok.value) if tok.value else "end of formula"
            raise FormulaError(
                f"expected a column name, '1', or '0'; found {shown}",
                self.text,
                tok.pos,
            )
        names = [tok.value]
        while self.peek().value == ":":
            self.next()
            part = self.next()
            if part.kind != "name":
                raise FormulaError("expected column name after ':'", self.text, part.pos)
            if part.value not in names:
                names.append(part.value)
        return Term(tuple(names))


class _TermCollector:
    """Accumulates terms in appearance order with R's intercept rules."""

    def __init__(self) -> None:
        self._terms: list[Term] = []
        self._suppress_intercept = False
        self._explicit_intercept = False

    def add(self, terms: list[Term | None]) -> None:
        for t in terms:
            if t is None:
                self._suppress_intercept = True
            elif t.is_intercept:
                self._explicit_intercept = True
            elif t not in self._terms:
                self._terms.append(t)

    def terms(self) -> list[Term]:
        intercept = self._explicit_intercept or not self._suppress_intercept
        return ([INTERCEPT] if intercept else []) + self._terms


def _cross(a: Term, b: Term) -> Term:
    names = list(a.factors)
    for name in b.factors:
        if name not in names:
            names.append(name)
    return Term(tuple(names))


def parse_formula(text: str) -> Formula:
    """Parse ``text`` into a :class:`Formula`.

    Raises :class:`FormulaError` (with a character position) on bad input.
    """
    if text.count("~") != 1:
        raise FormulaError(
            "formula must contain exactly one '~'", text, max(text.find("~"), 0)
        )
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Formatting and transforms
# ---------------------------------------------------------------------------


def _format_terms(terms: tuple[Term, ...]) -> str:
    has_intercept = any(t.is_intercept for t in terms)
    parts = ["1"] if has_intercept else ["0"]
    parts += [str(t) for t in terms if not t.is_intercept]
    return " + ".join(parts)


def format_formula(f: Formula) -> str:
    """Canonical text form; ``parse_formula`` round-trips it structurally."""
    rhs = [_format_terms(f.fixed)]
    rhs += [str(rt) for rt in f.random]
    return f"{f.response} ~ {' + '.join(rhs)}"


def zcp_transform(f: Formula) -> Formula:
    """Force every random term's correlation parameters to zero.

    Idempotent; the fixed part and the variance components are untouched.
    """
    return replace(
        f, random=tuple(replace(rt, correlated=False) for rt in f.random)
    )


def drop_random_columns(
    f: Formula, removals: set[tuple[str, Term]]
) -> Formula:
    """Remove (group, inner term) components from the random part.

    Terms whose component list empties out are deleted entirely.
    """
    new_random: list[RandomTerm] = []
    for rt in f.random:
        kept = tuple(t for t in rt.terms if (rt.group, t) not in removals)
        if kept:
            new_random.append(replace(rt, terms=kept))
    return replace(f, random=tuple(new_random))
