"""Formal query values: predicate trees, canonical form, and wire text.

The canonical rendering is the cache key: And/Or children are sorted by
their own canonical text, double negation is eliminated, `in` lists are
sorted and deduplicated, and numeric literals use a fixed shortest
round-trip decimal form. The 64-bit key is FNV-1a over that text, so keys
are bit-exact across processes and machines.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from datetime import date
from typing import Any, Optional, Union

from . import records

TARGETS = records.ENTITIES
CMP_OPS = ("=", "!=", "<", "<=", ">", ">=", "between", "in")
SCALAR_OPS = ("=", "!=", "<", "<=", ">", ">=")
MAX_PREDICATE_DEPTH = 32

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


class QueryError(ValueError):
    """Query value violates the formal-query contract."""


class QueryDecodeError(QueryError):
    """Wire text cannot be decoded; carries the byte offset when known."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Cmp:
    attr: str
    op: str
    value: Any  # scalar, (lo, hi) for between, tuple for in


@dataclass(frozen=True)
class DerivedCmp:
    provider: str
    params: dict
    op: str
    value: float


@dataclass(frozen=True)
class Not:
    child: "Predicate"


@dataclass(frozen=True)
class And:
    children: tuple["Predicate", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Predicate", ...]


@dataclass(frozen=True)
class Const:
    """Plan-internal constant leaf (derived-leaf relaxation); not wire-encodable."""

    value: bool


Predicate = Union[Cmp, DerivedCmp, Not, And, Or, Const]


@dataclass(frozen=True)
class Scope:
    origin_site: str
    hop_budget: int


@dataclass(frozen=True)
class FormalQuery:
    target: str
    predicate: Predicate
    projection: Optional[tuple[str, ...]] = None  # None means ALL
    scope: Scope = Scope("", 1)


@dataclass(frozen=True)
class CanonicalQuery:
    canonical_text: str
    key: int

    @property
    def key_hex(self) -> str:
        return f"{self.key:016x}"


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for b in text.encode("utf-8"):
        h ^= b
        h = (h * FNV_PRIME) & _U64
    return h


# ---------------------------------------------------------------------------
# Literal rendering


def literal_text(v: Any) -> str:
    """Fixed rendering for literals: integral numbers drop their fraction."""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        if not math.isfinite(v):
            raise QueryError("non-finite literal")
        if v == int(v) and abs(v) < 1e16:
            return str(int(v))
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v, ensure_ascii=True)
    raise QueryError(f"unsupported literal {v!r}")


def _params_text(params: Any) -> str:
    if isinstance(params, dict):
        inner = ",".join(f"{k}={_params_text(params[k])}" for k in sorted(params))
        return "{" + inner + "}"
    if isinstance(params, (list, tuple)):
        return "[" + ",".join(_params_text(v) for v in params) + "]"
    return literal_text(params)


def _literal_sort_key(v: Any):
    if isinstance(v, bool):
        return (0, int(v))
    if isinstance(v, (int, float)):
        return (1, float(v))
    return (2, v)


# ---------------------------------------------------------------------------
# Canonical form


def _canon(node: Predicate) -> tuple[Predicate, str]:
    if isinstance(node, Cmp):
        if node.op == "between":
            lo, hi = node.value
            text = f"(cmp {node.attr} between {literal_text(lo)} {literal_text(hi)})"
            return Cmp(node.attr, "between", (lo, hi)), text
        if node.op == "in":
            vals: list = []
            for v in sorted(node.value, key=_literal_sort_key):
                if v not in vals:
                    vals.append(v)
            text = f"(cmp {node.attr} in [{','.join(literal_text(v) for v in vals)}])"
            return Cmp(node.attr, "in", tuple(vals)), text
        text = f"(cmp {node.attr} {node.op} {literal_text(node.value)})"
        return node, text
    if isinstance(node, DerivedCmp):
        text = (f"(derived {node.provider} {_params_text(node.params)}"
                f" {node.op} {literal_text(node.value)})")
        return node, text
    if isinstance(node, Not):
        child, _ = _canon(node.child)
        if isinstance(child, Not):
            return _canon(child.child)
        _, child_text = _canon(child)
        return Not(child), f"(not {child_text})"
    if isinstance(node, (And, Or)):
        tag = "and" if isinstance(node, And) else "or"
        pairs = sorted((_canon(c) for c in node.children), key=lambda p: p[1])
        children = tuple(p[0] for p in pairs)
        text = f"({tag} {' '.join(p[1] for p in pairs)})"
        return type(node)(children), text
    if isinstance(node, Const):
        return node, f"(const {'true' if node.value else 'false'})"
    raise QueryError(f"unknown predicate node {node!r}")


def canonical_predicate(node: Predicate) -> Predicate:
    return _canon(node)[0]


def canonical_text(q: FormalQuery) -> str:
    """Deterministic rendering; origin_site is deliberately excluded.

    The knowledge base is per node, so the origin is constant there and two
    queries differing only in origin are the same question.
    """
    proj = "ALL" if q.projection is None else ",".join(q.projection)
    _, pred_text = _canon(q.predicate)
    return f"find {q.target} hop={q.scope.hop_budget} proj={proj} where {pred_text}"


def normalize(q: FormalQuery) -> CanonicalQuery:
    text = canonical_text(q)
    return CanonicalQuery(text, fnv1a64(text))


# ---------------------------------------------------------------------------
# Validation


def _literal_ok(kind: str, v: Any) -> bool:
    if kind in ("int", "real"):
        return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(float(v))
    if kind == "bool":
        return isinstance(v, bool)
    if kind == "date":
        if not isinstance(v, str):
            return False
        try:
            date.fromisoformat(v)
            return True
        except ValueError:
            return False
    return isinstance(v, str)


def _check_params(params: Any) -> None:
    if isinstance(params, dict):
        for k, v in params.items():
            if not isinstance(k, str):
                raise QueryError("derived params keys must be strings")
            _check_params(v)
        return
    if isinstance(params, (list, tuple)):
        for v in params:
            _check_params(v)
        return
    if params is None or isinstance(params, (bool, int, float, str)):
        if isinstance(params, float) and not math.isfinite(params):
            raise QueryError("non-finite derived param")
        return
    raise QueryError(f"unsupported derived param {params!r}")


def _validate_predicate(node: Predicate, target: str, depth: int) -> None:
    if depth > MAX_PREDICATE_DEPTH:
        raise QueryError(f"predicate deeper than {MAX_PREDICATE_DEPTH}")
    if isinstance(node, Cmp):
        if node.attr not in records.SCHEMA_PATHS:
            raise QueryError(f"unknown attribute path {node.attr!r}")
        entity, _, kind = records.SCHEMA_PATHS[node.attr]
        if kind == "list":
            raise QueryError(f"attribute path {node.attr!r} is not comparable")
        if entity not in records.reachable_entities(target):
            raise QueryError(f"attribute path {node.attr!r} unreachable from target {target!r}")
        if node.op not in CMP_OPS:
            raise QueryError(f"unknown comparison op {node.op!r}")
        if node.op == "between":
            if not (isinstance(node.value, (tuple, list)) and len(node.value) == 2):
                raise QueryError("between needs exactly two literals")
            lo, hi = node.value
            if not (_literal_ok(kind, lo) and _literal_ok(kind, hi)):
                raise QueryError(f"between literals incompatible with {node.attr}")
            if kind in ("int", "real"):
                if float(lo) > float(hi):
                    raise QueryError("between needs lo <= hi")
            elif lo > hi:
                raise QueryError("between needs lo <= hi")
        elif node.op == "in":
            if not (isinstance(node.value, (tuple, list)) and len(node.value) >= 1):
                raise QueryError("in needs a non-empty literal list")
            for v in node.value:
                if not _literal_ok(kind, v):
                    raise QueryError(f"in literal incompatible with {node.attr}")
        else:
            if not _literal_ok(kind, node.value):
                raise QueryError(f"literal incompatible with {node.attr}")
            if kind == "bool" and node.op not in ("=", "!="):
                raise QueryError("boolean attributes support only = and !=")
        return
    if isinstance(node, DerivedCmp):
        if not node.provider or not isinstance(node.provider, str):
            raise QueryError("derived comparison needs a provider id")
        if node.op not in SCALAR_OPS:
            raise QueryError(f"derived comparison op {node.op!r} not allowed")
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise QueryError("derived comparison needs a numeric literal")
        if not isinstance(node.params, dict):
            raise QueryError("derived params must be an object")
        _check_params(node.params)
        return
    if isinstance(node, Not):
        _validate_predicate(node.child, target, depth + 1)
        return
    if isinstance(node, (And, Or)):
        if not node.children:
            raise QueryError("and/or needs at least one child")
        for c in node.children:
            _validate_predicate(c, target, depth + 1)
        return
    if isinstance(node, Const):
        raise QueryError("constant nodes are plan-internal")
    raise QueryError(f"unknown predicate node {node!r}")


def validate_query(q: FormalQuery) -> None:
    if q.target not in TARGETS:
        raise QueryError(f"unknown target {q.target!r}")
    if q.scope.hop_budget not in (0, 1):
        raise QueryError("hop_budget must be 0 or 1")
    if not isinstance(q.scope.origin_site, str):
        raise QueryError("origin_site must be a string")
    if q.projection is not None:
        if not q.projection:
            raise QueryError("projection must be ALL or a non-empty path list")
        for p in q.projection:
            if p not in records.SCHEMA_PATHS:
                raise QueryError(f"unknown projection path {p!r}")
            if records.path_entity(p) not in records.reachable_entities(q.target):
                raise QueryError(f"projection path {p!r} unreachable from {q.target!r}")
    _validate_predicate(q.predicate, q.target, 1)


def with_hop(q: FormalQuery, hop_budget: int) -> FormalQuery:
    return replace(q, scope=Scope(q.scope.origin_site, hop_budget))


# ---------------------------------------------------------------------------
# Wire text (JSON)


def _node_to_obj(node: Predicate) -> dict:
    if isinstance(node, Cmp):
        value = list(node.value) if node.op in ("between", "in") else node.value
        return {"kind": "cmp", "attr": node.attr, "op": node.op, "value": value}
    if isinstance(node, DerivedCmp):
        return {"kind": "derived", "provider": node.provider, "params": node.params,
                "op": node.op, "value": node.value}
    if isinstance(node, Not):
        return {"kind": "not", "child": _node_to_obj(node.child)}
    if isinstance(node, And):
        return {"kind": "and", "children": [_node_to_obj(c) for c in node.children]}
    if isinstance(node, Or):
        return {"kind": "or", "children": [_node_to_obj(c) for c in node.children]}
    raise QueryError(f"node {node!r} is not wire-encodable")


def encode(q: FormalQuery) -> str:
    """Deterministic JSON wire text for a valid query."""
    validate_query(q)
    obj = {
        "target": q.target,
        "predicate": _node_to_obj(q.predicate),
        "projection": "ALL" if q.projection is None else list(q.projection),
        "scope": {"origin_site": q.scope.origin_site, "hop_budget": q.scope.hop_budget},
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _node_from_obj(obj: Any) -> Predicate:
    if not isinstance(obj, dict) or "kind" not in obj:
        raise QueryDecodeError("predicate node must be a tagged object")
    kind = obj["kind"]
    if kind == "cmp":
        try:
            attr, op, value = obj["attr"], obj["op"], obj["value"]
        except KeyError as exc:
            raise QueryDecodeError(f"cmp node missing {exc.args[0]}") from None
        if op in ("between", "in"):
            if not isinstance(value, list):
                raise QueryDecodeError(f"{op} value must be a list")
            value = tuple(value)
        return Cmp(attr, op, value)
    if kind == "derived":
        try:
            return DerivedCmp(obj["provider"], obj["params"], obj["op"], obj["value"])
        except KeyError as exc:
            raise QueryDecodeError(f"derived node missing {exc.args[0]}") from None
    if kind == "not":
        if "child" not in obj:
            raise QueryDecodeError("not node missing child")
        return Not(_node_from_obj(obj["child"]))
    if kind in ("and", "or"):
        children = obj.get("children")
        if not isinstance(children, list) or not children:
            raise QueryDecodeError(f"{kind} node needs a non-empty children list")
        nodes = tuple(_node_from_obj(c) for c in children)
        return And(nodes) if kind == "and" else Or(nodes)
    raise QueryDecodeError(f"unknown predicate kind {kind!r}")


def decode(text: str) -> FormalQuery:
    """Parse wire text back into a validated FormalQuery."""
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise QueryDecodeError(exc.msg, offset=exc.pos) from None
    if not isinstance(obj, dict):
        raise QueryDecodeError("wire text must be a JSON object")
    for key in ("target", "predicate", "projection", "scope"):
        if key not in obj:
            raise QueryDecodeError(f"missing field {key!r}")
    scope_obj = obj["scope"]
    if not isinstance(scope_obj, dict):
        raise QueryDecodeError("scope must be an object")
    try:
        scope = Scope(scope_obj["origin_site"], scope_obj["hop_budget"])
    except KeyError as exc:
        raise QueryDecodeError(f"scope missing {exc.args[0]}") from None
    proj_obj = obj["projection"]
    if proj_obj == "ALL":
        projection = None
    elif isinstance(proj_obj, list):
        projection = tuple(proj_obj)
    else:
        raise QueryDecodeError("projection must be \"ALL\" or a path list")
    q = FormalQuery(obj["target"], _node_from_obj(obj["predicate"]), projection, scope)
    try:
        validate_query(q)
    except QueryDecodeError:
        raise
    except QueryError as exc:
        raise QueryDecodeError(str(exc)) from None
    return q
