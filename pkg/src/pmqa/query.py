"""PubMed boolean query language: AST, parser, renderer, normalizer.

The pipeline only ever speaks a deliberately small subset of PubMed
query syntax, fixed by the prompt contract every query-writing stage is
held to:

    query    := unit (" AND " unit)*
    unit     := or_group | date | term
    or_group := "(" term (" OR " term)+ ")"
    term     := words ["[mesh]"]
    date     := YYYY:YYYY"[pdat]" | YYYY/MM/DD:YYYY/MM/DD"[pdat]"

AND is the only top-level connective, OR groups are always
parenthesized and contain plain terms, and the only recognized field
tags are ``[mesh]`` and ``[pdat]``.  Anything richer coming back from a
model is a syntax error that triggers one re-draft upstream, never a
guess here.

Uppercase ``AND``/``OR`` are reserved operators; their lowercase forms
may appear inside term text (real MeSH headings such as "Bites and
Stings" contain them).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date as _date
from enum import Enum
from typing import Iterator, Union


class QuerySyntaxError(Exception):
    """Malformed query text, with the character position of the problem."""

    def __init__(self, message: str, position: int = 0):
        super().__init__(f"at {position}: {message}")
        self.message = message
        self.position = position


class FieldTag(Enum):
    """Field qualifier of a query token; controls the rendered suffix."""

    MESH = "mesh"
    PUBDATE = "pdat"
    UNTAGGED = ""

    @property
    def suffix(self) -> str:
        return f"[{self.value}]" if self.value else ""


_YEAR_RANGE = re.compile(r"^(\d{4}):(\d{4})$")
_DAY_RANGE = re.compile(r"^(\d{4})/(\d{2})/(\d{2}):(\d{4})/(\d{2})/(\d{2})$")
_FORBIDDEN_TERM_CHARS = set("[]()")


@dataclass(frozen=True)
class DateRange:
    """Publication-date window, year or year/month/day precision.

    Both endpoints carry the same precision and start <= end; the
    zero-padded text forms make the comparison lexicographic.
    """

    start: str
    end: str

    def __post_init__(self):
        if _YEAR_RANGE.match(f"{self.start}:{self.end}"):
            pass
        elif _DAY_RANGE.match(f"{self.start}:{self.end}"):
            for endpoint in (self.start, self.end):
                y, m, d = (int(p) for p in endpoint.split("/"))
                try:
                    _date(y, m, d)
                except ValueError as exc:
                    raise ValueError(f"invalid calendar date {endpoint!r}: {exc}") from exc
        else:
            raise ValueError(
                f"date range {self.start!r}:{self.end!r} must be YYYY:YYYY or "
                "YYYY/MM/DD:YYYY/MM/DD (no mixed precision)"
            )
        if self.start > self.end:
            raise ValueError(f"date range start {self.start!r} after end {self.end!r}")

    @property
    def day_precision(self) -> bool:
        return "/" in self.start

    def contains(self, pub_date: str) -> bool:
        """Whether a document date (year or Y/M/D precision) falls inside.

        Missing month/day components default to January 1st.
        """
        parts = pub_date.split("/")
        if not parts[0].isdigit():
            return False
        y = int(parts[0])
        m = int(parts[1]) if len(parts) > 1 else 1
        d = int(parts[2]) if len(parts) > 2 else 1
        if not self.day_precision:
            return int(self.start) <= y <= int(self.end)
        lo = tuple(int(p) for p in self.start.split("/"))
        hi = tuple(int(p) for p in self.end.split("/"))
        return lo <= (y, m, d) <= hi


@dataclass(frozen=True)
class Term:
    """A search term, optionally MeSH-tagged.

    Text is canonicalized to single internal spaces so rendering and
    re-parsing are exact inverses; brackets, parentheses, and standalone
    uppercase AND/OR are rejected because they cannot round-trip.
    """

    text: str
    tag: FieldTag = FieldTag.UNTAGGED

    def __post_init__(self):
        canonical = " ".join(self.text.split())
        if not canonical:
            raise ValueError("term text must be nonempty")
        if _FORBIDDEN_TERM_CHARS & set(canonical):
            raise ValueError(f"term text {canonical!r} may not contain []()")
        if any(w in ("AND", "OR") for w in canonical.split()):
            raise ValueError(f"term text {canonical!r} may not contain bare AND/OR")
        if self.tag is FieldTag.PUBDATE:
            raise ValueError("date windows are DateNode values, not terms")
        object.__setattr__(self, "text", canonical)

    def key(self) -> tuple:
        """Identity under case-folding, used for dedup."""
        return ("term", self.text.casefold(), self.tag.value)


@dataclass(frozen=True)
class DateNode:
    """A publication-date constraint in a query."""

    range: DateRange

    def key(self) -> tuple:
        return ("date", self.range.start, self.range.end)


@dataclass(frozen=True)
class OrGroup:
    """Parenthesized alternatives: two or more plain terms joined by OR."""

    children: tuple[Term, ...]

    def __post_init__(self):
        if len(self.children) < 2:
            raise ValueError("OR group needs at least two terms")
        if not all(isinstance(c, Term) for c in self.children):
            raise ValueError("OR group children must be terms")
        object.__setattr__(self, "children", tuple(self.children))

    def key(self) -> tuple:
        return ("or",) + tuple(c.key() for c in self.children)

    def all_mesh(self) -> bool:
        return all(c.tag is FieldTag.MESH for c in self.children)


@dataclass(frozen=True)
class AndSeq:
    """Top-level conjunction; the only connective allowed at the top."""

    children: tuple[Union[Term, DateNode, OrGroup], ...]

    def __post_init__(self):
        if not self.children:
            raise ValueError("query must contain at least one unit")
        if not all(isinstance(c, (Term, DateNode, OrGroup)) for c in self.children):
            raise ValueError("AND sequence children must be terms, dates, or OR groups")
        object.__setattr__(self, "children", tuple(self.children))


QueryExpr = Union[Term, DateNode, OrGroup, AndSeq]


# ----------------------------------------------------------------------
# Parsing
# ----------------------------------------------------------------------

_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")
_TAG_RE = re.compile(r"^(.*)\[([A-Za-z]+)\]$", re.DOTALL)


def _tokenize(text: str) -> Iterator[tuple[str, str, int]]:
    for m in _TOKEN_RE.finditer(text):
        tok = m.group(0)
        if tok == "(":
            yield ("LPAREN", tok, m.start())
        elif tok == ")":
            yield ("RPAREN", tok, m.start())
        elif tok == "AND":
            yield ("AND", tok, m.start())
        elif tok == "OR":
            yield ("OR", tok, m.start())
        else:
            yield ("WORD", tok, m.start())


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = list(_tokenize(text))
        self.pos = 0

    def _peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else ("EOF", "", len(self.text))

    def _next(self):
        tok = self._peek()
        self.pos += 1
        return tok

    def parse(self) -> AndSeq:
        units = [self._parse_unit()]
        while True:
            kind, _, pos = self._peek()
            if kind == "EOF":
                break
            if kind != "AND":
                raise QuerySyntaxError("expected AND between query units", pos)
            self._next()
            units.append(self._parse_unit())
        return AndSeq(tuple(units))

    def _parse_unit(self):
        kind, _, pos = self._peek()
        if kind == "LPAREN":
            return self._parse_or_group()
        if kind in ("AND", "OR"):
            raise QuerySyntaxError(f"dangling {kind} operator", pos)
        if kind in ("RPAREN", "EOF"):
            raise QuerySyntaxError("expected a term", pos)
        return self._parse_term(allow_date=True)

    def _parse_or_group(self) -> OrGroup:
        _, _, open_pos = self._next()
        members = [self._parse_term(allow_date=False)]
        while True:
            kind, _, pos = self._peek()
            if kind == "OR":
                self._next()
                members.append(self._parse_term(allow_date=False))
            elif kind == "RPAREN":
                self._next()
                break
            elif kind == "EOF":
                raise QuerySyntaxError("unbalanced parenthesis", open_pos)
            else:
                raise QuerySyntaxError("expected OR or ) inside group", pos)
        if len(members) < 2:
            raise QuerySyntaxError("OR group must contain at least two terms", open_pos)
        return OrGroup(tuple(members))

    def _parse_term(self, allow_date: bool):
        words = []
        start_pos = self._peek()[2]
        while self._peek()[0] == "WORD":
            words.append(self._next())
        if not words:
            kind, _, pos = self._peek()
            what = "end of input" if kind == "EOF" else kind
            raise QuerySyntaxError(f"expected a term, found {what}", pos)

        # Only the final word may carry a [tag] suffix.
        tag = None
        last_kind, last_text, last_pos = words[-1]
        m = _TAG_RE.match(last_text)
        if m:
            stem, tag_name = m.group(1), m.group(2).lower()
            if tag_name == "mesh":
                tag = FieldTag.MESH
            elif tag_name == "pdat":
                tag = FieldTag.PUBDATE
            else:
                raise QuerySyntaxError(f"unknown field tag [{tag_name}]", last_pos)
            words[-1] = (last_kind, stem, last_pos)

        for _, w, pos in words:
            if "[" in w or "]" in w:
                raise QuerySyntaxError("brackets are only valid as a trailing field tag", pos)

        text = " ".join(w for _, w, _ in words if w)
        if not text:
            raise QuerySyntaxError("field tag without a term", start_pos)

        if tag is FieldTag.PUBDATE:
            if not allow_date:
                raise QuerySyntaxError("date ranges may not appear inside OR groups", start_pos)
            if len(words) != 1:
                raise QuerySyntaxError("date range must be a single token", start_pos)
            try:
                lo, _, hi = text.partition(":")
                return DateNode(DateRange(lo, hi))
            except ValueError as exc:
                raise QuerySyntaxError(str(exc), start_pos) from exc
        return Term(text, tag or FieldTag.UNTAGGED)


def parse_query(text: str) -> AndSeq:
    """Parse raw query text into the AST, or raise QuerySyntaxError.

    The input must be nonempty after trimming.  Field-tag case is folded
    (``[MeSH]`` == ``[mesh]``); everything else is preserved, so
    ``render_query(parse_query(s))`` is token-equivalent to ``s``.
    """
    if not text or not text.strip():
        raise QuerySyntaxError("empty query", 0)
    return _Parser(text).parse()


# ----------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------


def render_query(q: QueryExpr) -> str:
    """Render an AST to its canonical string: single spaces, lowercase
    tags, OR groups parenthesized."""
    if isinstance(q, AndSeq):
        return " AND ".join(render_query(c) for c in q.children)
    if isinstance(q, OrGroup):
        return "(" + " OR ".join(render_query(c) for c in q.children) + ")"
    if isinstance(q, DateNode):
        return f"{q.range.start}:{q.range.end}{FieldTag.PUBDATE.suffix}"
    if isinstance(q, Term):
        return q.text + q.tag.suffix
    raise TypeError(f"not a query node: {q!r}")


# ----------------------------------------------------------------------
# Normalization
# ----------------------------------------------------------------------


def _order_class(child) -> int:
    # MeSH material first, then dates, then everything untagged.
    if isinstance(child, Term) and child.tag is FieldTag.MESH:
        return 0
    if isinstance(child, OrGroup) and child.all_mesh():
        return 0
    if isinstance(child, DateNode):
        return 1
    return 2


def normalize_query(q: QueryExpr) -> AndSeq:
    """Canonicalize a parsed query.

    Within each OR group, case-fold duplicates are dropped (first
    occurrence wins) and singletons collapse to their term.  Duplicate
    children of the top AND sequence are then dropped the same way, and
    finally children are stably reordered: MeSH terms and all-MeSH OR
    groups, then date ranges, then untagged material.  Idempotent.
    """
    if not isinstance(q, AndSeq):
        q = AndSeq((q,))

    flattened = []
    for child in q.children:
        if isinstance(child, OrGroup):
            seen: dict[tuple, Term] = {}
            for member in child.children:
                seen.setdefault(member.key(), member)
            members = tuple(seen.values())
            child = members[0] if len(members) == 1 else OrGroup(members)
        flattened.append(child)

    deduped: dict[tuple, object] = {}
    for child in flattened:
        deduped.setdefault(child.key(), child)

    ordered = sorted(deduped.values(), key=_order_class)
    return AndSeq(tuple(ordered))


def is_normalized(q: QueryExpr) -> bool:
    return isinstance(q, AndSeq) and normalize_query(q) == q


def mesh_terms_of(q: QueryExpr) -> set[str]:
    """Case-folded text of every MeSH-tagged term, including OR members."""
    found: set[str] = set()

    def walk(node):
        if isinstance(node, AndSeq):
            for c in node.children:
                walk(c)
        elif isinstance(node, OrGroup):
            for c in node.children:
                walk(c)
        elif isinstance(node, Term) and node.tag is FieldTag.MESH:
            found.add(node.text.casefold())

    walk(q)
    return found


def date_nodes_of(q: QueryExpr) -> list[DateNode]:
    if isinstance(q, AndSeq):
        return [c for c in q.children if isinstance(c, DateNode)]
    return [q] if isinstance(q, DateNode) else []


def with_date_window(q: QueryExpr, window: DateRange) -> AndSeq:
    """Return the query constrained to exactly one matching date window.

    Any date node already matching the window is kept; others are
    replaced.  The result is normalized.
    """
    if not isinstance(q, AndSeq):
        q = AndSeq((q,))
    kept = [c for c in q.children if not isinstance(c, DateNode)]
    kept.append(DateNode(window))
    return normalize_query(AndSeq(tuple(kept)))
