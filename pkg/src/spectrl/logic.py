"""Task formulas for reach/avoid specifications.

A formula is built from four constructs:

    achieve <conj>          reach a step whose labels match the conjunction
    <spec> ensuring <conj>  the conjunction must hold at every step
    <spec> ; <spec>         sequencing, second part starts strictly after the first
    <spec> or <spec>        choice

`<conj>` is a conjunction of plain and negated propositions (`a & !b`).
Precedence, tightest first: `ensuring`, `;`, `or`. Parentheses group.

Satisfaction is decided over finite label traces (one set of true
propositions per step). A trace satisfies a formula when some prefix does;
satisfaction is therefore monotone under trace extension.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence, Union

import numpy as np

__all__ = [
    "SymbolConj",
    "conj",
    "Achieve",
    "Ensuring",
    "Seq",
    "Or",
    "Spec",
    "SpecError",
    "SpecSyntaxError",
    "UnknownPropositionError",
    "ContradictorySymbolError",
    "parse_spec",
    "unparse",
    "spec_alphabet",
    "check_satisfaction",
    "prefix_acceptance",
    "parse_trace",
    "format_trace",
]


class SpecError(ValueError):
    """Base class for specification errors."""


class SpecSyntaxError(SpecError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


class UnknownPropositionError(SpecSyntaxError):
    pass


class ContradictorySymbolError(SpecSyntaxError):
    pass


# ---------------------------------------------------------------------------
# AST
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SymbolConj:
    """Conjunction of required (positive) and forbidden (negated) propositions."""

    positives: frozenset[str]
    negatives: frozenset[str]

    def __post_init__(self):
        clash = self.positives & self.negatives
        if clash:
            raise SpecError(f"contradictory symbol, both required and forbidden: {sorted(clash)}")

    @property
    def props(self) -> frozenset[str]:
        return self.positives | self.negatives

    def holds(self, labels: Iterable[str]) -> bool:
        labels = set(labels)
        return self.positives <= labels and not (self.negatives & labels)

    def __str__(self) -> str:
        lits = sorted(self.positives) + ["!" + p for p in sorted(self.negatives)]
        return " & ".join(lits)


def conj(positives: Iterable[str] = (), negatives: Iterable[str] = ()) -> SymbolConj:
    return SymbolConj(frozenset(positives), frozenset(negatives))


@dataclass(frozen=True)
class Achieve:
    symbol: SymbolConj


@dataclass(frozen=True)
class Ensuring:
    spec: "Spec"
    condition: SymbolConj


@dataclass(frozen=True)
class Seq:
    first: "Spec"
    second: "Spec"


@dataclass(frozen=True)
class Or:
    left: "Spec"
    right: "Spec"


Spec = Union[Achieve, Ensuring, Seq, Or]


def spec_alphabet(spec: Spec) -> list[str]:
    """All propositions mentioned by the formula, sorted."""
    props: set[str] = set()

    def walk(node: Spec):
        if isinstance(node, Achieve):
            props.update(node.symbol.props)
        elif isinstance(node, Ensuring):
            walk(node.spec)
            props.update(node.condition.props)
        elif isinstance(node, (Seq, Or)):
            walk(node.first if isinstance(node, Seq) else node.left)
            walk(node.second if isinstance(node, Seq) else node.right)
        else:  # pragma: no cover
            raise TypeError(f"not a spec node: {node!r}")

    walk(spec)
    return sorted(props)


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------

IDENT_RE = re.compile(r"[a-z][a-z0-9_]*")
KEYWORDS = {"achieve", "ensuring", "or"}


class TT(Enum):
    IDENT = "ident"
    ACHIEVE = "achieve"
    ENSURING = "ensuring"
    OR = "or"
    SEMI = ";"
    AMP = "&"
    BANG = "!"
    LPAREN = "("
    RPAREN = ")"
    EOF = "eof"


@dataclass(frozen=True)
class Token:
    kind: TT
    value: str
    line: int
    col: int


def _tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    line, col = 1, 1
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":  # comment to end of line
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch in ";&!()":
            kind = {";": TT.SEMI, "&": TT.AMP, "!": TT.BANG, "(": TT.LPAREN, ")": TT.RPAREN}[ch]
            tokens.append(Token(kind, ch, line, col))
            i += 1
            col += 1
            continue
        m = IDENT_RE.match(text, i)
        if m:
            word = m.group(0)
            if word == "achieve":
                kind = TT.ACHIEVE
            elif word == "ensuring":
                kind = TT.ENSURING
            elif word == "or":
                kind = TT.OR
            else:
                kind = TT.IDENT
            tokens.append(Token(kind, word, line, col))
            col += len(word)
            i += len(word)
            continue
        raise SpecSyntaxError(f"unexpected character {ch!r}", line, col)
    tokens.append(Token(TT.EOF, "", line, col))
    return tokens


# ---------------------------------------------------------------------------
# Parser (recursive descent)
#
#   spec     := seq ('or' seq)*
#   seq      := ens (';' ens)*
#   ens      := primary ('ensuring' conj)*
#   primary  := 'achieve' conj | '(' spec ')'
#   conj     := literal ('&' literal)* | '(' conj ')'
#   literal  := '!'? IDENT
# ---------------------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[Token], alphabet: Sequence[str] | None):
        self.tokens = tokens
        self.pos = 0
        self.alphabet = None if alphabet is None else set(alphabet)

    def peek(self) -> Token:
        return self.tokens[self.pos]

    def next(self) -> Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind: TT) -> Token:
        tok = self.peek()
        if tok.kind is not kind:
            raise SpecSyntaxError(
                f"expected {kind.value!r}, found {tok.value or 'end of input'!r}", tok.line, tok.col
            )
        return self.next()

    def parse(self) -> Spec:
        spec = self.spec()
        tok = self.peek()
        if tok.kind is not TT.EOF:
            raise SpecSyntaxError(f"unexpected trailing input {tok.value!r}", tok.line, tok.col)
        return spec

    def spec(self) -> Spec:
        node = self.seq()
        while self.peek().kind is TT.OR:
            self.next()
            node = Or(node, self.seq())
        return node

    def seq(self) -> Spec:
        node = self.ens()
        while self.peek().kind is TT.SEMI:
            self.next()
            node = Seq(node, self.ens())
        return node

    def ens(self) -> Spec:
        node = self.primary()
        while self.peek().kind is TT.ENSURING:
            self.next()
            node = Ensuring(node, self.conj())
        return node

    def primary(self) -> Spec:
        tok = self.peek()
        if tok.kind is TT.ACHIEVE:
            self.next()
            return Achieve(self.conj())
        if tok.kind is TT.LPAREN:
            self.next()
            node = self.spec()
            self.expect(TT.RPAREN)
            return node
        raise SpecSyntaxError(
            f"expected 'achieve' or '(', found {tok.value or 'end of input'!r}", tok.line, tok.col
        )

    def conj(self) -> SymbolConj:
        if self.peek().kind is TT.LPAREN:
            self.next()
            sym = self.conj()
            self.expect(TT.RPAREN)
            return sym
        pos: set[str] = set()
        neg: set[str] = set()
        self.literal(pos, neg)
        while self.peek().kind is TT.AMP:
            self.next()
            self.literal(pos, neg)
        return SymbolConj(frozenset(pos), frozenset(neg))

    def literal(self, pos: set[str], neg: set[str]):
        negated = False
        tok = self.peek()
        if tok.kind is TT.BANG:
            self.next()
            negated = True
        tok = self.expect(TT.IDENT)
        name = tok.value
        if self.alphabet is not None and name not in self.alphabet:
            raise UnknownPropositionError(f"unknown proposition {name!r}", tok.line, tok.col)
        if (negated and name in pos) or (not negated and name in neg):
            raise ContradictorySymbolError(
                f"proposition {name!r} both required and forbidden", tok.line, tok.col
            )
        (neg if negated else pos).add(name)


def parse_spec(text: str, alphabet: Sequence[str] | None = None) -> Spec:
    """Parse a formula. With `alphabet` given, unknown propositions are rejected."""
    return _Parser(_tokenize(text), alphabet).parse()


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------


def _conj_text(sym: SymbolConj) -> str:
    text = str(sym)
    return f"({text})" if len(sym.props) > 1 else text


def unparse(spec: Spec) -> str:
    """Canonical text form; `parse_spec(unparse(s))` is structurally equal to `s`."""
    if isinstance(spec, Achieve):
        return f"achieve {_conj_text(spec.symbol)}"
    if isinstance(spec, Ensuring):
        inner = unparse(spec.spec)
        if isinstance(spec.spec, (Seq, Or)):
            inner = f"({inner})"
        return f"{inner} ensuring {_conj_text(spec.condition)}"
    if isinstance(spec, Seq):
        left = unparse(spec.first)
        if isinstance(spec.first, Or):
            left = f"({left})"
        right = unparse(spec.second)
        if isinstance(spec.second, (Seq, Or)):
            right = f"({right})"
        return f"{left}; {right}"
    if isinstance(spec, Or):
        left = unparse(spec.left)
        right = unparse(spec.right)
        if isinstance(spec.right, Or):
            right = f"({right})"
        return f"{left} or {right}"
    raise TypeError(f"not a spec node: {spec!r}")


# ---------------------------------------------------------------------------
# Satisfaction
#
# The batch evaluator computes, per AST node, the boolean relation
# R[b, i, j] = "steps i..j of trace b satisfy the node exactly". Sequencing is
# relation composition, choice is union, safety masks the relation with an
# all-steps window test. Acceptance of a prefix of length j+1 is then the
# cumulative-or of R[b, 0, :j+1].
# ---------------------------------------------------------------------------


def prefix_acceptance(spec: Spec, traces: np.ndarray, props: Sequence[str]) -> np.ndarray:
    """Satisfaction verdicts for every prefix of every trace.

    `traces` is a boolean array of shape (batch, steps, len(props)) where
    entry [b, t, p] says proposition `props[p]` is true at step t of trace b.
    Returns a boolean array (batch, steps); entry [b, j] is True when the
    prefix of length j+1 (or any shorter one) satisfies the formula.
    """
    traces = np.asarray(traces, dtype=bool)
    if traces.ndim != 3:
        raise ValueError("traces must have shape (batch, steps, props)")
    nb, nt, np_ = traces.shape
    if np_ != len(props):
        raise ValueError("trace proposition axis does not match props")
    if nt == 0:
        return np.zeros((nb, 0), dtype=bool)
    index = {p: i for i, p in enumerate(props)}

    def pointwise(sym: SymbolConj) -> np.ndarray:
        ok = np.ones((nb, nt), dtype=bool)
        for p in sorted(sym.positives):
            ok &= traces[:, :, index[p]]
        for p in sorted(sym.negatives):
            ok &= ~traces[:, :, index[p]]
        return ok

    def window_any(point: np.ndarray) -> np.ndarray:
        # R[b, i, j] = any(point[b, i..j])
        rel = np.zeros((nb, nt, nt), dtype=bool)
        for i in range(nt):
            rel[:, i, i:] = np.logical_or.accumulate(point[:, i:], axis=1)
        return rel

    def window_all(point: np.ndarray) -> np.ndarray:
        rel = np.zeros((nb, nt, nt), dtype=bool)
        for i in range(nt):
            rel[:, i, i:] = np.logical_and.accumulate(point[:, i:], axis=1)
        return rel

    def relation(node: Spec) -> np.ndarray:
        if isinstance(node, Achieve):
            return window_any(pointwise(node.symbol))
        if isinstance(node, Ensuring):
            return relation(node.spec) & window_all(pointwise(node.condition))
        if isinstance(node, Seq):
            r1 = relation(node.first).astype(np.uint8)
            r2 = relation(node.second)
            shifted = np.zeros_like(r2)
            shifted[:, :-1, :] = r2[:, 1:, :]
            return (r1 @ shifted.astype(np.uint8)) != 0
        if isinstance(node, Or):
            return relation(node.left) | relation(node.right)
        raise TypeError(f"not a spec node: {node!r}")

    missing = [p for p in spec_alphabet(spec) if p not in index]
    if missing:
        raise ValueError(f"props does not cover formula propositions: {missing}")
    return np.logical_or.accumulate(relation(spec)[:, 0, :], axis=1)


def check_satisfaction(spec: Spec, labels: Sequence[Iterable[str]]) -> bool:
    """True when some prefix of the label trace satisfies the formula."""
    steps = [frozenset(step) for step in labels]
    if not steps:
        return False
    props = spec_alphabet(spec)
    if not props:
        raise SpecError("formula mentions no propositions")
    arr = np.zeros((1, len(steps), len(props)), dtype=bool)
    index = {p: i for i, p in enumerate(props)}
    for t, step in enumerate(steps):
        for p in step:
            if p in index:  # propositions outside the formula never matter
                arr[0, t, index[p]] = True
    return bool(prefix_acceptance(spec, arr, props)[0, -1])


# ---------------------------------------------------------------------------
# Trace files: one line per step, true propositions separated by spaces,
# an empty line is an empty label set.
# ---------------------------------------------------------------------------


def parse_trace(text: str) -> list[frozenset[str]]:
    lines = text.split("\n")
    if lines and lines[-1] == "":  # trailing newline, not an extra step
        lines.pop()
    trace = []
    for lineno, line in enumerate(lines, start=1):
        names = line.split()
        for name in names:
            if not IDENT_RE.fullmatch(name):
                raise SpecSyntaxError(f"bad proposition name {name!r} in trace", lineno, 1)
        trace.append(frozenset(names))
    return trace


def format_trace(trace: Sequence[Iterable[str]]) -> str:
    return "\n".join(" ".join(sorted(step)) for step in trace) + "\n" if trace else ""
