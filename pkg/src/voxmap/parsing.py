"""Text forms of regions and predicates used on the command line.

Regions: ``aabb:x0,y0,z0,x1,y1,z1``, ``sphere:cx,cy,cz,r`` or ``all``.

Predicates::

    expr   := term ("or" term)*
    term   := factor ("and" factor)*
    factor := "not" factor | "(" expr ")" | atom
    atom   := "state" "in" "(" STATE ("," STATE)* ")" | "state" "=" STATE
            | "has_label" LABEL | "top_label" "=" LABEL
            | "updated_before" INT | "updated_at_or_after" INT

LABEL is an integer id or a class name resolved through the label set.
"""

import re
from typing import Mapping, NamedTuple, Optional

from voxmap.errors import SpecSyntaxError
from voxmap.octree import OccupancyState
from voxmap.query import (
    AABB,
    And,
    Everything,
    HasLabel,
    Not,
    Or,
    Predicate,
    Region,
    Sphere,
    StateIn,
    TopLabelIs,
    UpdatedAtOrAfter,
    UpdatedBefore,
)

_TOKEN = re.compile(r"\s*(?:(?P<number>-?\d+)|(?P<word>[A-Za-z_][\w\-]*)|(?P<symbol>[(),=]))")


class Token(NamedTuple):
    kind: str
    text: str
    position: int


def parse_region(text: str) -> Region:
    kind, separator, body = text.partition(":")
    kind = kind.strip().lower()
    if kind in ("all", "everything") and not separator:
        return Everything()
    if not separator:
        raise SpecSyntaxError("expected 'aabb:' or 'sphere:'", text, 0)
    offset = len(kind) + 1
    values: list[float] = []
    for part in body.split(","):
        try:
            values.append(float(part))
        except ValueError:
            raise SpecSyntaxError(f"not a number: {part.strip()!r}", text, offset) from None
        offset += len(part) + 1
    try:
        if kind == "aabb":
            if len(values) != 6:
                raise SpecSyntaxError("aabb needs 6 numbers", text, len(text))
            return AABB(tuple(values[:3]), tuple(values[3:]))  # type: ignore[arg-type]
        if kind == "sphere":
            if len(values) != 4:
                raise SpecSyntaxError("sphere needs 4 numbers", text, len(text))
            return Sphere(tuple(values[:3]), values[3])  # type: ignore[arg-type]
    except ValueError as e:
        raise SpecSyntaxError(str(e), text, len(kind) + 1) from e
    raise SpecSyntaxError(f"unknown region kind {kind!r}", text, 0)


def _tokenize(text: str) -> list[Token]:
    tokens: list[Token] = []
    position = 0
    while position < len(text):
        if text[position:].strip() == "":
            break
        match = _TOKEN.match(text, position)
        if match is None:
            start = len(text) - len(text[position:].lstrip())
            raise SpecSyntaxError(f"unexpected character {text[start]!r}", text, start)
        kind = match.lastgroup
        assert kind is not None
        tokens.append(Token(kind, match.group(kind), match.start(kind)))
        position = match.end()
    return tokens


class _PredicateParser:
    def __init__(self, text: str, names: Mapping[str, int]):
        self.text = text
        self.names = names
        self.tokens = _tokenize(text)
        self.index = 0

    def error(self, message: str, token: Optional[Token] = None) -> SpecSyntaxError:
        position = token.position if token is not None else len(self.text)
        return SpecSyntaxError(message, self.text, position)

    def peek(self) -> Optional[Token]:
        return self.tokens[self.index] if self.index < len(self.tokens) else None

    def next(self, expected: str) -> Token:
        token = self.peek()
        if token is None:
            raise self.error(f"expected {expected}, found end of input")
        self.index += 1
        return token

    def keyword(self, word: str) -> bool:
        token = self.peek()
        if token is not None and token.kind == "word" and token.text.lower() == word:
            self.index += 1
            return True
        return False

    def expect(self, symbol: str):
        token = self.next(f"'{symbol}'")
        if token.text != symbol:
            raise self.error(f"expected '{symbol}'", token)

    def parse(self) -> Predicate:
        if not self.tokens:
            raise self.error("empty predicate")
        predicate = self.expression()
        token = self.peek()
        if token is not None:
            raise self.error(f"unexpected {token.text!r}", token)
        return predicate

    def expression(self) -> Predicate:
        terms = [self.term()]
        while self.keyword("or"):
            terms.append(self.term())
        return terms[0] if len(terms) == 1 else Or(tuple(terms))

    def term(self) -> Predicate:
        factors = [self.factor()]
        while self.keyword("and"):
            factors.append(self.factor())
        return factors[0] if len(factors) == 1 else And(tuple(factors))

    def factor(self) -> Predicate:
        if self.keyword("not"):
            return Not(self.factor())
        token = self.peek()
        if token is not None and token.text == "(":
            self.index += 1
            predicate = self.expression()
            self.expect(")")
            return predicate
        return self.atom()

    def atom(self) -> Predicate:
        token = self.next("a predicate")
        word = token.text.lower()
        if token.kind != "word":
            raise self.error(f"expected a predicate, found {token.text!r}", token)
        if word == "state":
            if self.keyword("in"):
                self.expect("(")
                states = {self.state()}
                while self.peek() is not None and self.peek().text == ",":  # type: ignore[union-attr]
                    self.index += 1
                    states.add(self.state())
                self.expect(")")
                return StateIn(frozenset(states))
            self.expect("=")
            return StateIn(frozenset({self.state()}))
        if word == "has_label":
            return HasLabel(self.label())
        if word == "top_label":
            self.expect("=")
            return TopLabelIs(self.label())
        if word == "updated_before":
            return UpdatedBefore(self.integer())
        if word == "updated_at_or_after":
            return UpdatedAtOrAfter(self.integer())
        raise self.error(f"unknown predicate {token.text!r}", token)

    def state(self) -> OccupancyState:
        token = self.next("a state")
        try:
            return OccupancyState(token.text.lower())
        except ValueError:
            raise self.error(
                f"unknown state {token.text!r}, expected unknown, free or occupied", token
            ) from None

    def integer(self) -> int:
        token = self.next("an integer")
        if token.kind != "number":
            raise self.error(f"expected an integer, found {token.text!r}", token)
        return int(token.text)

    def label(self) -> int:
        token = self.next("a label")
        if token.kind == "number":
            label = int(token.text)
            if not 0 <= label < 1 << 16:
                raise self.error(f"label {label} outside [0, 65535]", token)
            return label
        if token.kind == "word" and token.text in self.names:
            return self.names[token.text]
        raise self.error(f"unknown label {token.text!r}", token)


def parse_predicate(text: str, names: Optional[Mapping[str, int]] = None) -> Predicate:
    return _PredicateParser(text, names or {}).parse()
