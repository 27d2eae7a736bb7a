"""Independent brute-force query evaluator used as the tests' ground truth.

Walks every record of raw dict tables (built straight from the generated
JSONL objects), resolves attribute paths and provider values with its own
code, and renders rows with its own formatter. It shares nothing with the
engine's statement-plan executor or federation machinery.
"""

from __future__ import annotations

import json
import math

from mammofed.query import And, Cmp, DerivedCmp, FormalQuery, Not, Or

# path -> (entity, field, kind); transcribed by hand from the fixed schema.
PATHS = {
    "patient.patient_id": ("patients", "patient_id", "str"),
    "patient.age_years": ("patients", "age_years", "int"),
    "patient.children_count": ("patients", "children_count", "int"),
    "patient.age_first_pregnancy": ("patients", "age_first_pregnancy", "int"),
    "patient.age_last_pregnancy": ("patients", "age_last_pregnancy", "int"),
    "patient.hrt": ("patients", "hrt", "bool"),
    "patient.hrt_start": ("patients", "hrt_start", "str"),
    "patient.site_id": ("patients", "site_id", "str"),
    "study.study_id": ("studies", "study_id", "str"),
    "study.patient_id": ("studies", "patient_id", "str"),
    "study.study_date": ("studies", "study_date", "str"),
    "study.reader_ids": ("studies", "reader_ids", "list"),
    "study.diagnosis": ("studies", "diagnosis", "str"),
    "study.diagnosed_laterality": ("studies", "diagnosed_laterality", "str"),
    "study.therapy_outcome": ("studies", "therapy_outcome", "str"),
    "image.image_id": ("images", "image_id", "str"),
    "image.study_id": ("images", "study_id", "str"),
    "image.laterality": ("images", "laterality", "str"),
    "image.view": ("images", "view", "str"),
    "image.breast_area_mm2": ("images", "breast_area_mm2", "real"),
    "image.mean_density": ("images", "mean_density", "real"),
    "image.feature_vector": ("images", "feature_vector", "list"),
    "annotation.annotation_id": ("annotations", "annotation_id", "str"),
    "annotation.image_id": ("annotations", "image_id", "str"),
    "annotation.author": ("annotations", "author", "str"),
    "annotation.kind": ("annotations", "kind", "str"),
    "annotation.regions": ("annotations", "regions", "list"),
    "annotation.microcalc_count": ("annotations", "microcalc_count", "int"),
    "annotation.session_length_min": ("annotations", "session_length_min", "real"),
    "annotation.serial_order": ("annotations", "serial_order", "int"),
    "annotation.reading": ("annotations", "reading", "str"),
    "annotation.author_experience_years": ("annotations", "author_experience_years", "int"),
}

ALL_ORDER = {
    "patients": ("patient.patient_id", "patient.age_years", "patient.children_count",
                 "patient.age_first_pregnancy", "patient.age_last_pregnancy",
                 "patient.hrt", "patient.hrt_start", "patient.site_id"),
    "studies": ("study.study_id", "study.patient_id", "study.study_date",
                "study.reader_ids", "study.diagnosis", "study.diagnosed_laterality",
                "study.therapy_outcome"),
    "images": ("image.image_id", "image.study_id", "image.laterality", "image.view",
               "image.breast_area_mm2", "image.mean_density", "image.feature_vector"),
    "annotations": ("annotation.annotation_id", "annotation.image_id",
                    "annotation.author", "annotation.kind", "annotation.regions",
                    "annotation.microcalc_count", "annotation.session_length_min",
                    "annotation.serial_order", "annotation.reading",
                    "annotation.author_experience_years"),
}

PARENT = {"annotations": ("images", "image_id"),
          "images": ("studies", "study_id"),
          "studies": ("patients", "patient_id")}

ID_FIELD = {"patients": "patient_id", "studies": "study_id",
            "images": "image_id", "annotations": "annotation_id"}

INT_FIELDS = {"age_years", "children_count", "age_first_pregnancy", "age_last_pregnancy",
              "microcalc_count", "serial_order", "author_experience_years"}
REAL_FIELDS = {"breast_area_mm2", "mean_density", "session_length_min"}


def lookup(tables, row, row_entity, path):
    entity, fieldname, _ = PATHS[path]
    rec = row
    current = row_entity
    while current != entity:
        parent, ref = PARENT[current]
        rec = tables[parent].get(rec.get(ref))
        if rec is None:
            return None
        current = parent
    value = rec.get(fieldname)
    if value is None:
        return None
    if fieldname in INT_FIELDS:
        return int(value)
    if fieldname in REAL_FIELDS:
        return float(value)
    if fieldname == "feature_vector":
        return [float(x) for x in value]
    return value


def render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return json.dumps(_deep(value), separators=(",", ":"))
    raise AssertionError(f"unrenderable {value!r}")


def _deep(value):
    return [(_deep(v) if isinstance(v, (list, tuple)) else v) for v in value]


def compare(value, op, literal, kind):
    if value is None:
        return False
    if kind in ("int", "real"):
        a = float(value)
        if op == "between":
            return float(literal[0]) <= a <= float(literal[1])
        if op == "in":
            return any(a == float(x) for x in literal)
        b = float(literal)
    elif kind == "bool":
        return (value is literal) if op == "=" else (value is not literal) if op == "!=" else False
    else:
        a = render(value)
        if op == "between":
            return literal[0] <= a <= literal[1]
        if op == "in":
            return a in list(literal)
        b = literal
    return {"=": a == b, "!=": a != b, "<": a < b, "<=": a <= b,
            ">": a > b, ">=": a >= b}[op]


# -- providers, recomputed from their defining formulas --


def _sim(u, v):
    return 1.0 / (1.0 + math.sqrt(sum((x - y) ** 2 for x, y in zip(u, v))))


def _images_of(tables, row, row_entity):
    if row_entity == "images":
        return [row]
    if row_entity == "annotations":
        img = tables["images"].get(row.get("image_id"))
        return [img] if img else []
    if row_entity == "studies":
        return [i for i in tables["images"].values() if i["study_id"] == row["study_id"]]
    sids = {s["study_id"] for s in tables["studies"].values()
            if s["patient_id"] == row["patient_id"]}
    return [i for i in tables["images"].values() if i["study_id"] in sids]


def _studies_of(tables, row, row_entity):
    if row_entity == "studies":
        return [row]
    if row_entity == "images":
        s = tables["studies"].get(row.get("study_id"))
        return [s] if s else []
    if row_entity == "annotations":
        img = tables["images"].get(row.get("image_id"))
        if not img:
            return []
        s = tables["studies"].get(img.get("study_id"))
        return [s] if s else []
    return [s for s in tables["studies"].values() if s["patient_id"] == row["patient_id"]]


def provider_value(tables, row, row_entity, leaf: DerivedCmp):
    if leaf.provider == "find_one_like_it":
        feats = leaf.params.get("reference_features")
        if feats is None:
            ref = tables["images"].get(leaf.params.get("reference"))
            if ref is None:
                return None
            feats = {ref["view"]: ref["feature_vector"]}
        requested = leaf.params.get("views") or ["CC", "MLO"]
        best = None
        for img in _images_of(tables, row, row_entity):
            if img["view"] not in requested or img["view"] not in feats:
                continue
            s = _sim([float(x) for x in feats[img["view"]]],
                     [float(x) for x in img["feature_vector"]])
            if best is None or s > best:
                best = s
        return best
    if leaf.provider == "density_asymmetry":
        best = None
        for study in _studies_of(tables, row, row_entity):
            sides = {}
            for img in tables["images"].values():
                if img["study_id"] == study["study_id"]:
                    sides[(img["view"], img["laterality"])] = float(img["mean_density"])
            for view in ("CC", "MLO"):
                if (view, "L") in sides and (view, "R") in sides:
                    d = abs(sides[(view, "L")] - sides[(view, "R")])
                    if best is None or d > best:
                        best = d
        return best
    raise AssertionError(f"oracle has no provider {leaf.provider!r}")


class _Undefined(Exception):
    pass


def _eval(node, tables, row, row_entity):
    if isinstance(node, Cmp):
        kind = PATHS[node.attr][2]
        return compare(lookup(tables, row, row_entity, node.attr), node.op, node.value, kind)
    if isinstance(node, DerivedCmp):
        v = provider_value(tables, row, row_entity, node)
        if v is None:
            raise _Undefined
        return compare(v, node.op, node.value, "real")
    if isinstance(node, Not):
        return not _eval(node.child, tables, row, row_entity)
    if isinstance(node, And):
        return all(_eval(c, tables, row, row_entity) for c in node.children)
    if isinstance(node, Or):
        return any(_eval(c, tables, row, row_entity) for c in node.children)
    raise AssertionError(f"oracle cannot evaluate {node!r}")


def matches(q: FormalQuery, tables, row) -> bool:
    """A record matches iff every derived leaf is defined and the tree is true."""
    leaves: list[DerivedCmp] = []

    def walk(node):
        if isinstance(node, DerivedCmp):
            leaves.append(node)
        elif isinstance(node, Not):
            walk(node.child)
        elif isinstance(node, (And, Or)):
            for c in node.children:
                walk(c)

    walk(q.predicate)
    for leaf in leaves:
        if provider_value(tables, row, q.target, leaf) is None:
            return False
    try:
        return _eval(q.predicate, tables, row, q.target)
    except _Undefined:
        return False


def project(q: FormalQuery, tables, row) -> tuple:
    paths = q.projection if q.projection is not None else ALL_ORDER[q.target]
    fields = []
    for path in paths:
        value = lookup(tables, row, q.target, path)
        if value is not None:
            fields.append((path, render(value)))
    return tuple(fields)


def evaluate(q: FormalQuery, tables) -> set[tuple]:
    """All matching rows as (entity, id, fields) triples, site ignored."""
    out = set()
    for row in tables[q.target].values():
        if matches(q, tables, row):
            out.add((q.target, row[ID_FIELD[q.target]], project(q, tables, row)))
    return out


def engine_rows_site_blind(rows) -> set[tuple]:
    return {(r.entity, r.id, r.fields) for r in rows}
