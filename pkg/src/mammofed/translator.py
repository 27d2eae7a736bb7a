"""Turns clinician phrasing into formal queries.

The DSL is deliberately small:

    find <entity> [local] where <cond> { and|or <cond> }

with parentheses for grouping and three condition shapes:

    <term> <op> <literal>           op: = != < <= > >=, or the word `over` (means >)
    <term> between <a> and <b>      inclusive on both ends
    <term> like image <id> threshold <t> [in MLO|CC|both]

Terms are looked up case-insensitively in a TermDictionary mapping user
vocabulary onto attribute paths or derived-data provider ids. The shipped
default dictionary lives in resources/term_dictionary.jsonl.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources as importlib_resources
from typing import Optional

from . import records
from .query import And, Cmp, DerivedCmp, FormalQuery, Or, Predicate, Scope, validate_query

FIND_ONE_LIKE_IT = "find_one_like_it"
DENSITY_ASYMMETRY = "density_asymmetry"

_ENTITY_WORDS = {
    "patient": "patients", "patients": "patients",
    "study": "studies", "studies": "studies",
    "image": "images", "images": "images",
    "annotation": "annotations", "annotations": "annotations",
}

_OP_SYMBOLS = ("<=", ">=", "!=", "=", "<", ">")


class TranslationError(ValueError):
    """User text cannot be turned into a formal query."""


class DslParseError(TranslationError):
    """Grammar violation; carries the character position."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at position {pos})")
        self.pos = pos


class CriteriaError(ValueError):
    """Similarity criteria incomplete for the reference patient."""


class TermDictionary:
    """Case-insensitive map from user terms to attribute paths or providers."""

    def __init__(self, version: int = 0):
        self.version = version
        self._terms: dict[str, tuple[str, str]] = {}

    @staticmethod
    def _fold(term: str) -> str:
        return " ".join(term.lower().split())

    def add(self, term: str, kind: str, value: str) -> None:
        if kind not in ("attribute", "provider"):
            raise ValueError(f"unknown dictionary kind {kind!r}")
        if kind == "attribute" and value not in records.SCHEMA_PATHS:
            raise ValueError(f"dictionary maps {term!r} to unknown path {value!r}")
        folded = self._fold(term)
        prior = self._terms.get(folded)
        if prior is not None and prior != (kind, value):
            raise ValueError(f"conflicting dictionary entries for {term!r}")
        self._terms[folded] = (kind, value)

    def resolve(self, term: str) -> Optional[tuple[str, str]]:
        return self._terms.get(self._fold(term))

    def __len__(self) -> int:
        return len(self._terms)

    @classmethod
    def from_lines(cls, lines) -> "TermDictionary":
        """Load the versioned JSONL dictionary format (header line first)."""
        it = iter(lines)
        version = 0
        d = None
        for raw in it:
            text = raw.strip()
            if not text:
                continue
            obj = json.loads(text)
            if d is None:
                version = int(obj.get("dictionary_version", 0))
                d = cls(version)
                continue
            d.add(obj["term"], obj["kind"], obj["value"])
        return d if d is not None else cls()


def load_default_dictionary() -> TermDictionary:
    ref = importlib_resources.files("mammofed").joinpath("resources/term_dictionary.jsonl")
    with ref.open("r", encoding="utf-8") as fh:
        return TermDictionary.from_lines(fh)


# ---------------------------------------------------------------------------
# Tokenizer

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<lparen>\()
      | (?P<rparen>\))
      | (?P<op><=|>=|!=|=|<|>)
      | (?P<number>-?\d+(?:\.\d+)?)
      | (?P<string>"(?:[^"\\]|\\.)*")
      | (?P<word>[A-Za-z_][A-Za-z0-9_.\-]*)
    )""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            raise DslParseError(f"unexpected character {stripped[0]!r}",
                                pos + (len(text[pos:]) - len(stripped)))
        kind = m.lastgroup
        tokens.append(_Token(kind, m.group(kind), m.start(kind)))
        pos = m.end()
    return tokens


class _Parser:
    _BOUNDARY_WORDS = {"between", "over"}

    def __init__(self, text: str, dictionary: TermDictionary):
        self.text = text
        self.dict = dictionary
        self.tokens = _tokenize(text)
        self.i = 0

    # -- token helpers --

    def _peek(self, ahead: int = 0) -> Optional[_Token]:
        j = self.i + ahead
        return self.tokens[j] if j < len(self.tokens) else None

    def _next(self) -> _Token:
        tok = self._peek()
        if tok is None:
            raise DslParseError("unexpected end of query", len(self.text))
        self.i += 1
        return tok

    def _expect_word(self, word: str) -> _Token:
        tok = self._next()
        if tok.kind != "word" or tok.text.lower() != word:
            raise DslParseError(f"expected {word!r}", tok.pos)
        return tok

    def _at_word(self, word: str) -> bool:
        tok = self._peek()
        return tok is not None and tok.kind == "word" and tok.text.lower() == word

    # -- grammar --

    def parse(self) -> tuple[str, bool, Predicate]:
        self._expect_word("find")
        ent_tok = self._next()
        target = _ENTITY_WORDS.get(ent_tok.text.lower()) if ent_tok.kind == "word" else None
        if target is None:
            raise DslParseError(f"expected an entity name, got {ent_tok.text!r}", ent_tok.pos)
        local = False
        if self._at_word("local"):
            self._next()
            local = True
        self._expect_word("where")
        pred = self._disjunction()
        tok = self._peek()
        if tok is not None:
            raise DslParseError(f"trailing input {tok.text!r}", tok.pos)
        return target, local, pred

    def _disjunction(self) -> Predicate:
        parts = [self._conjunction()]
        while self._at_word("or"):
            self._next()
            parts.append(self._conjunction())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def _conjunction(self) -> Predicate:
        parts = [self._condition()]
        while self._at_word("and"):
            self._next()
            parts.append(self._condition())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def _condition(self) -> Predicate:
        tok = self._peek()
        if tok is not None and tok.kind == "lparen":
            self._next()
            inner = self._disjunction()
            closing = self._next()
            if closing.kind != "rparen":
                raise DslParseError("expected ')'", closing.pos)
            return inner
        return self._simple_condition()

    def _gather_term(self) -> tuple[str, int]:
        """Collect term words up to an operator boundary.

        `like` ends the term only when followed by `image`, so dictionary
        terms containing the word "like" still resolve.
        """
        words = []
        start = None
        while True:
            tok = self._peek()
            if tok is None or tok.kind in ("op", "lparen", "rparen"):
                break
            if tok.kind != "word":
                break
            low = tok.text.lower()
            if low in self._BOUNDARY_WORDS and words:
                break
            if low == "like" and words:
                nxt = self._peek(1)
                if nxt is not None and nxt.kind == "word" and nxt.text.lower() == "image":
                    break
            if low in ("and", "or") and words:
                break
            words.append(tok.text)
            start = tok.pos if start is None else start
            self._next()
        if not words:
            tok = self._peek()
            pos = tok.pos if tok else len(self.text)
            raise DslParseError("expected a term", pos)
        return " ".join(words), start if start is not None else 0

    def _literal(self):
        tok = self._next()
        if tok.kind == "number":
            return float(tok.text) if "." in tok.text else int(tok.text)
        if tok.kind == "string":
            body = tok.text[1:-1]
            return re.sub(r"\\(.)", r"\1", body)
        if tok.kind == "word":
            low = tok.text.lower()
            if low == "true":
                return True
            if low == "false":
                return False
            return tok.text
        raise DslParseError(f"expected a literal, got {tok.text!r}", tok.pos)

    def _resolve(self, term: str, pos: int) -> tuple[str, str]:
        resolved = self.dict.resolve(term)
        if resolved is None:
            raise TranslationError(f'unknown term "{term}"')
        return resolved

    def _simple_condition(self) -> Predicate:
        term, pos = self._gather_term()
        kind, value = self._resolve(term, pos)
        tok = self._peek()
        if tok is None:
            raise DslParseError("expected an operator", len(self.text))

        if tok.kind == "word" and tok.text.lower() == "like":
            self._next()
            self._expect_word("image")
            ref_tok = self._next()
            if ref_tok.kind not in ("word", "string", "number"):
                raise DslParseError("expected an image id", ref_tok.pos)
            ref = ref_tok.text.strip('"') if ref_tok.kind == "string" else ref_tok.text
            self._expect_word("threshold")
            thr_tok = self._next()
            if thr_tok.kind != "number":
                raise DslParseError("expected a threshold number", thr_tok.pos)
            threshold = float(thr_tok.text)
            views = list(records.VIEWS)
            if self._at_word("in"):
                self._next()
                view_tok = self._next()
                view = view_tok.text.upper() if view_tok.kind == "word" else ""
                if view == "BOTH":
                    views = list(records.VIEWS)
                elif view in records.VIEWS:
                    views = [view]
                else:
                    raise DslParseError("expected MLO, CC, or both", view_tok.pos)
            if kind != "provider":
                raise TranslationError(f'term "{term}" does not name an algorithm')
            return DerivedCmp(value, {"reference": ref, "views": sorted(views)},
                              ">=", threshold)

        if tok.kind == "word" and tok.text.lower() == "over":
            self._next()
            lit = self._literal()
            if kind == "provider":
                return DerivedCmp(value, {}, ">", float(lit))
            return Cmp(value, ">", lit)

        if tok.kind == "word" and tok.text.lower() == "between":
            self._next()
            lo = self._literal()
            self._expect_word("and")
            hi = self._literal()
            if kind == "provider":
                raise TranslationError(f'term "{term}" names an algorithm; use a threshold comparison')
            return Cmp(value, "between", (lo, hi))

        if tok.kind == "op":
            self._next()
            lit = self._literal()
            if kind == "provider":
                return DerivedCmp(value, {}, tok.text, float(lit))
            return Cmp(value, tok.text, lit)

        raise DslParseError(f"expected an operator, got {tok.text!r}", tok.pos)


def translate(text: str, dictionary: TermDictionary, origin_site: str = "") -> FormalQuery:
    """Translate DSL text into a formal query (hop 1 unless `local`)."""
    target, local, predicate = _Parser(text, dictionary).parse()
    q = FormalQuery(target, predicate, None, Scope(origin_site, 0 if local else 1))
    validate_query(q)
    return q


# ---------------------------------------------------------------------------
# Similar-case queries

CHILDREN_BANDS = ((0, 0), (1, 2), (3, 4), (5, None))


def children_band(count: int) -> tuple[int, Optional[int]]:
    """The band a children count falls into: {0}, [1,2], [3,4], or [5,inf)."""
    if count < 0:
        raise ValueError("children_count must be non-negative")
    for lo, hi in CHILDREN_BANDS:
        if count >= lo and (hi is None or count <= hi):
            return (lo, hi)
    raise AssertionError("bands partition the non-negative integers")


@dataclass(frozen=True)
class ImageMatchCriteria:
    reference_image: str
    threshold: float
    views: tuple[str, ...] = records.VIEWS


@dataclass(frozen=True)
class SimilarityCriteria:
    age_band: int = 3
    match_children_band: bool = False
    match_pregnancy_ages_band: Optional[int] = None
    image_match: Optional[ImageMatchCriteria] = None


def build_similarity_query(ref: records.PatientRecord, crit: SimilarityCriteria,
                           origin_site: str = "") -> FormalQuery:
    """Conjunction of enabled similarity criteria, excluding the reference patient.

    Targets images when an image-match criterion is set (the similarity
    algorithm scores candidate images), patients otherwise.
    """
    if crit.age_band < 0:
        raise CriteriaError("age_band must be non-negative")
    conjuncts: list[Predicate] = [
        Cmp("patient.age_years", "between",
            (max(0, ref.age_years - crit.age_band), ref.age_years + crit.age_band)),
    ]
    if crit.match_children_band:
        lo, hi = children_band(ref.children_count)
        if hi is None:
            conjuncts.append(Cmp("patient.children_count", ">=", lo))
        elif lo == hi:
            conjuncts.append(Cmp("patient.children_count", "=", lo))
        else:
            conjuncts.append(Cmp("patient.children_count", "between", (lo, hi)))
    if crit.match_pregnancy_ages_band is not None:
        band = crit.match_pregnancy_ages_band
        if band < 0:
            raise CriteriaError("pregnancy age band must be non-negative")
        if ref.age_first_pregnancy is None or ref.age_last_pregnancy is None:
            raise CriteriaError("reference patient lacks pregnancy ages")
        conjuncts.append(Cmp("patient.age_first_pregnancy", "between",
                             (max(0, ref.age_first_pregnancy - band),
                              ref.age_first_pregnancy + band)))
        conjuncts.append(Cmp("patient.age_last_pregnancy", "between",
                             (max(0, ref.age_last_pregnancy - band),
                              ref.age_last_pregnancy + band)))
    target = "patients"
    if crit.image_match is not None:
        im = crit.image_match
        if not 0.0 <= im.threshold <= 1.0:
            raise CriteriaError("threshold must be within [0, 1]")
        views = tuple(sorted(set(im.views)))
        if not views or any(v not in records.VIEWS for v in views):
            raise CriteriaError("views must be a non-empty subset of {MLO, CC}")
        conjuncts.append(DerivedCmp(FIND_ONE_LIKE_IT,
                                    {"reference": im.reference_image, "views": list(views)},
                                    ">=", im.threshold))
        target = "images"
    conjuncts.append(Cmp("patient.patient_id", "!=", ref.patient_id))
    q = FormalQuery(target, And(tuple(conjuncts)), None, Scope(origin_site, 1))
    validate_query(q)
    return q
