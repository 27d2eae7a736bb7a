"""Compiles formal queries into relational statement plans and runs them.

The plan shape is fixed: Scan, then one ResolvePath per foreign entity the
query touches, then a simple Filter, then (only when the predicate holds
derived-data comparisons) a DerivedFilter, then Project. The simple filter
is a relaxation of the full predicate: each derived leaf is replaced by a
constant chosen by negation parity, so it never rejects a record the full
predicate would accept. Providers therefore run only on records that
survive the cheap attribute filter.

A record whose derived value is undefined (for example, a study missing
one side of an L/R pair) is excluded from the result and counted in the
result header's skip count, whatever the surrounding boolean structure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Optional, Union

from . import records
from .query import (And, Cmp, Const, DerivedCmp, FormalQuery, Not, Or, Predicate,
                    QueryError, validate_query)
from .result_xml import ResultSet, Row, sort_rows, value_text

FIND_ONE_LIKE_IT = "find_one_like_it"
DENSITY_ASYMMETRY = "density_asymmetry"


class CompileError(QueryError):
    """Query cannot be compiled against the fixed schema."""


class ExecutionError(RuntimeError):
    """Statement plan failed at run time (for example, provider missing)."""


@dataclass(frozen=True)
class ScanStep:
    entity: str


@dataclass(frozen=True)
class ResolvePathStep:
    from_entity: str
    to_entity: str


@dataclass(frozen=True)
class FilterStep:
    predicate: Predicate  # simple leaves only (derived leaves relaxed to constants)


@dataclass(frozen=True)
class DerivedFilterStep:
    predicate: Predicate  # the full tree, derived leaves included


@dataclass(frozen=True)
class ProjectStep:
    paths: Optional[tuple[str, ...]]  # None means ALL


PlanStep = Union[ScanStep, ResolvePathStep, FilterStep, DerivedFilterStep, ProjectStep]


@dataclass(frozen=True)
class StatementPlan:
    target: str
    steps: tuple[PlanStep, ...]


# ---------------------------------------------------------------------------
# Compilation


def _collect(node: Predicate, paths: set[str], derived: list[DerivedCmp]) -> None:
    if isinstance(node, Cmp):
        paths.add(node.attr)
    elif isinstance(node, DerivedCmp):
        derived.append(node)
    elif isinstance(node, Not):
        _collect(node.child, paths, derived)
    elif isinstance(node, (And, Or)):
        for c in node.children:
            _collect(c, paths, derived)


def _relax(node: Predicate, negated: bool = False) -> Predicate:
    """Upper bound of the predicate with derived leaves removed."""
    if isinstance(node, Cmp) or isinstance(node, Const):
        return node
    if isinstance(node, DerivedCmp):
        return Const(not negated)
    if isinstance(node, Not):
        return Not(_relax(node.child, not negated))
    if isinstance(node, And):
        return And(tuple(_relax(c, negated) for c in node.children))
    if isinstance(node, Or):
        return Or(tuple(_relax(c, negated) for c in node.children))
    raise CompileError(f"unknown predicate node {node!r}")


def compile_statements(q: FormalQuery) -> StatementPlan:
    """Compile a formal query into the fixed relational step sequence."""
    try:
        validate_query(q)
    except QueryError as exc:
        raise CompileError(str(exc)) from None

    paths: set[str] = set()
    derived: list[DerivedCmp] = []
    _collect(q.predicate, paths, derived)
    if q.projection is not None:
        paths.update(q.projection)

    chain = records.reachable_entities(q.target)
    used_foreign = {records.path_entity(p) for p in paths} - {q.target}

    steps: list[PlanStep] = [ScanStep(q.target)]
    for i in range(1, len(chain)):
        if chain[i] in used_foreign:
            steps.append(ResolvePathStep(chain[i - 1], chain[i]))
    steps.append(FilterStep(_relax(q.predicate)))
    if derived:
        steps.append(DerivedFilterStep(q.predicate))
    steps.append(ProjectStep(q.projection))
    return StatementPlan(q.target, tuple(steps))


# ---------------------------------------------------------------------------
# Attribute resolution and comparison


def resolve_attr(row: Any, row_entity: str, path: str,
                 tables: dict[str, dict[str, Any]]) -> Any:
    """Walk the upward reference chain to the record holding `path`."""
    entity, fieldname, _ = records.SCHEMA_PATHS[path]
    rec = row
    current = row_entity
    while current != entity:
        parent, ref_field = records.UPWARD_REF[current]
        rec = tables[parent].get(getattr(rec, ref_field))
        if rec is None:
            return None
        current = parent
    return getattr(rec, fieldname)


def compare_values(value: Any, op: str, literal: Any, kind: str) -> bool:
    """Evaluate one comparison; absent values fail every comparison."""
    if value is None:
        return False
    if kind in ("int", "real"):
        a = float(value)
        if op == "between":
            lo, hi = literal
            return float(lo) <= a <= float(hi)
        if op == "in":
            return any(a == float(x) for x in literal)
        b = float(literal)
    elif kind == "bool":
        if op == "=":
            return value is literal
        if op == "!=":
            return value is not literal
        return False
    else:
        a = value_text(value)
        if op == "between":
            lo, hi = literal
            return lo <= a <= hi
        if op == "in":
            return any(a == x for x in literal)
        b = literal
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    if op == ">=":
        return a >= b
    raise ExecutionError(f"unknown comparison op {op!r}")


# ---------------------------------------------------------------------------
# Derived-data providers

ProviderFn = Callable[[dict, Any, str, dict], Optional[float]]


class ProviderRegistry:
    """Registry of deterministic derived-data providers.

    A provider maps (params, row record, row entity, tables) to a real, or
    None when the value is undefined for that record.
    """

    def __init__(self):
        self._providers: dict[str, ProviderFn] = {}

    def register(self, provider_id: str, fn: ProviderFn) -> None:
        self._providers[provider_id] = fn

    def get(self, provider_id: str) -> ProviderFn:
        try:
            return self._providers[provider_id]
        except KeyError:
            raise ExecutionError(f"unknown derived-data provider {provider_id!r}") from None

    def __contains__(self, provider_id: str) -> bool:
        return provider_id in self._providers


def similarity(a, b) -> float:
    """1 / (1 + Euclidean distance); 1.0 exactly for identical vectors."""
    dist = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    return 1.0 / (1.0 + dist)


def _candidate_images(row: Any, row_entity: str, tables: dict) -> list:
    if row_entity == "images":
        return [row]
    if row_entity == "annotations":
        img = tables["images"].get(row.image_id)
        return [img] if img is not None else []
    if row_entity == "studies":
        return [img for img in tables["images"].values() if img.study_id == row.study_id]
    # patients: every image of every study of the patient
    study_ids = {s.study_id for s in tables["studies"].values()
                 if s.patient_id == row.patient_id}
    return [img for img in tables["images"].values() if img.study_id in study_ids]


def _reference_features(params: dict, tables: dict) -> Optional[dict[str, tuple]]:
    feats = params.get("reference_features")
    if feats is not None:
        return {view: tuple(float(x) for x in vec) for view, vec in feats.items()}
    ref_id = params.get("reference")
    if ref_id is None:
        return None
    ref = tables["images"].get(ref_id)
    if ref is None:
        return None
    return {ref.view: ref.feature_vector}


def find_one_like_it(params: dict, row: Any, row_entity: str, tables: dict) -> Optional[float]:
    """Best per-view similarity between the reference and the row's images.

    Views compared are the requested ones (default both) for which both the
    reference and a candidate image exist; undefined when there is no
    comparable pair.
    """
    ref_feats = _reference_features(params, tables)
    if not ref_feats:
        return None
    requested = params.get("views") or list(records.VIEWS)
    best = None
    for img in _candidate_images(row, row_entity, tables):
        if img.view not in requested:
            continue
        ref_vec = ref_feats.get(img.view)
        if ref_vec is None:
            continue
        s = similarity(ref_vec, img.feature_vector)
        if best is None or s > best:
            best = s
    return best


def _study_asymmetry(study, tables: dict) -> Optional[float]:
    by_side: dict[tuple[str, str], Any] = {}
    for img in tables["images"].values():
        if img.study_id == study.study_id:
            by_side[(img.view, img.laterality)] = img
    best = None
    for view in records.VIEWS:
        left = by_side.get((view, "L"))
        right = by_side.get((view, "R"))
        if left is not None and right is not None:
            diff = abs(left.mean_density - right.mean_density)
            if best is None or diff > best:
                best = diff
    return best


def density_asymmetry(params: dict, row: Any, row_entity: str, tables: dict) -> Optional[float]:
    """Max over views of |mean density L - mean density R| for the row's studies;
    undefined when no study has both sides of a view."""
    if row_entity == "studies":
        studies = [row]
    elif row_entity == "images":
        s = tables["studies"].get(row.study_id)
        studies = [s] if s is not None else []
    elif row_entity == "annotations":
        img = tables["images"].get(row.image_id)
        s = tables["studies"].get(img.study_id) if img is not None else None
        studies = [s] if s is not None else []
    else:
        studies = [s for s in tables["studies"].values() if s.patient_id == row.patient_id]
    best = None
    for study in studies:
        a = _study_asymmetry(study, tables)
        if a is not None and (best is None or a > best):
            best = a
    return best


def default_providers() -> ProviderRegistry:
    reg = ProviderRegistry()
    reg.register(FIND_ONE_LIKE_IT, find_one_like_it)
    reg.register(DENSITY_ASYMMETRY, density_asymmetry)
    return reg


def evaluate_derived(provider_id: str, params: dict, row: Any, row_entity: str,
                     tables: dict, providers: ProviderRegistry) -> Optional[float]:
    return providers.get(provider_id)(params, row, row_entity, tables)


# ---------------------------------------------------------------------------
# Execution


class _Undefined(Exception):
    pass


def _eval_tree(node: Predicate, row: Any, entity: str, tables: dict,
               derived_values: Optional[dict[int, bool]]) -> bool:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Cmp):
        kind = records.SCHEMA_PATHS[node.attr][2]
        return compare_values(resolve_attr(row, entity, node.attr, tables),
                              node.op, node.value, kind)
    if isinstance(node, DerivedCmp):
        if derived_values is None:
            raise ExecutionError("derived leaf reached the simple filter")
        return derived_values[id(node)]
    if isinstance(node, Not):
        return not _eval_tree(node.child, row, entity, tables, derived_values)
    if isinstance(node, And):
        return all(_eval_tree(c, row, entity, tables, derived_values) for c in node.children)
    if isinstance(node, Or):
        return any(_eval_tree(c, row, entity, tables, derived_values) for c in node.children)
    raise ExecutionError(f"unknown predicate node {node!r}")


def _derived_leaves(node: Predicate, out: list[DerivedCmp]) -> None:
    if isinstance(node, DerivedCmp):
        out.append(node)
    elif isinstance(node, Not):
        _derived_leaves(node.child, out)
    elif isinstance(node, (And, Or)):
        for c in node.children:
            _derived_leaves(c, out)


def _project(row: Any, entity: str, paths: Optional[tuple[str, ...]],
             tables: dict, site_id: str) -> Row:
    selected = paths if paths is not None else records.PROJECTION_ORDER[entity]
    fields = []
    for path in selected:
        value = resolve_attr(row, entity, path, tables)
        if value is not None:
            fields.append((path, value_text(value)))
    row_id = getattr(row, records.ID_FIELD[entity])
    return Row(site_id, entity, row_id, tuple(fields))


def execute_local(p: StatementPlan, store: records.SiteStore,
                  prov: ProviderRegistry, query_id: str = "Q-" + "0" * 32) -> ResultSet:
    """Run a statement plan against a consistent store snapshot."""
    snap = store.snapshot()
    tables = snap.tables
    survivors = [tables[p.target][rid] for rid in sorted(tables[p.target])]
    skipped = 0
    projection: Optional[tuple[str, ...]] = None

    for step in p.steps:
        if isinstance(step, ScanStep) or isinstance(step, ResolvePathStep):
            continue  # scans/joins happen during attribute resolution
        if isinstance(step, FilterStep):
            survivors = [r for r in survivors
                         if _eval_tree(step.predicate, r, p.target, tables, None)]
        elif isinstance(step, DerivedFilterStep):
            leaves: list[DerivedCmp] = []
            _derived_leaves(step.predicate, leaves)
            kept = []
            for r in survivors:
                values: dict[int, bool] = {}
                try:
                    for leaf in leaves:
                        v = evaluate_derived(leaf.provider, leaf.params, r,
                                             p.target, tables, prov)
                        if v is None:
                            raise _Undefined
                        values[id(leaf)] = compare_values(v, leaf.op, leaf.value, "real")
                except _Undefined:
                    skipped += 1
                    continue
                if _eval_tree(step.predicate, r, p.target, tables, values):
                    kept.append(r)
            survivors = kept
        elif isinstance(step, ProjectStep):
            projection = step.paths

    rows = sort_rows(_project(r, p.target, projection, tables, snap.site_id)
                     for r in survivors)
    return ResultSet(query_id, snap.site_id, rows, snap.version, skipped)


def run_formal_query(q: FormalQuery, store: records.SiteStore, prov: ProviderRegistry,
                     query_id: str = "Q-" + "0" * 32) -> ResultSet:
    """Compile-and-execute convenience for a single store."""
    return execute_local(compile_statements(q), store, prov, query_id)
