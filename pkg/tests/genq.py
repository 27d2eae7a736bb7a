"""Seeded random formal-query generator for the equivalence properties.

Leaves draw literals near the data generator's value ranges so predicates
actually select rows; attribute paths are restricted to the entities
reachable upward from the target.
"""

from __future__ import annotations

import random

from mammofed.query import And, Cmp, DerivedCmp, FormalQuery, Not, Or, Scope

_REACHABLE = {
    "patients": ("patient",),
    "studies": ("study", "patient"),
    "images": ("image", "study", "patient"),
    "annotations": ("annotation", "image", "study", "patient"),
}

_NUMERIC = {
    "patient.age_years": (35, 80, True),
    "patient.children_count": (0, 7, True),
    "patient.age_first_pregnancy": (18, 32, True),
    "patient.age_last_pregnancy": (18, 42, True),
    "image.breast_area_mm2": (4000, 12000, False),
    "image.mean_density": (0, 1, False),
    "annotation.microcalc_count": (0, 12, True),
    "annotation.serial_order": (1, 30, True),
    "annotation.session_length_min": (5, 40, False),
    "annotation.author_experience_years": (1, 30, True),
}

_CATEGORICAL = {
    "patient.hrt": (True, False),
    "image.view": ("CC", "MLO"),
    "image.laterality": ("L", "R"),
    "study.diagnosis": ("normal", "benign", "cancer"),
    "study.diagnosed_laterality": ("left", "right"),
    "study.therapy_outcome": ("successful", "unsuccessful"),
    "annotation.kind": ("mass", "microcalcification_cluster"),
    "annotation.author": ("R1", "R2", "R3", "cad"),
    "annotation.reading": ("first", "second"),
}

_DATES = ("study.study_date", "patient.hrt_start")


def _paths_for(target: str, table: dict) -> list[str]:
    prefixes = _REACHABLE[target]
    return [p for p in table if p.split(".", 1)[0] in prefixes]


def _numeric_leaf(rng: random.Random, path: str) -> Cmp:
    lo, hi, integral = _NUMERIC[path]
    def draw():
        if integral:
            return rng.randint(lo, hi)
        return round(rng.uniform(lo, hi), 2)
    op = rng.choice(("=", "!=", "<", "<=", ">", ">=", "between", "in"))
    if op == "between":
        a, b = sorted((draw(), draw()))
        return Cmp(path, "between", (a, b))
    if op == "in":
        return Cmp(path, "in", tuple(draw() for _ in range(rng.randint(1, 4))))
    return Cmp(path, op, draw())


def _categorical_leaf(rng: random.Random, path: str) -> Cmp:
    values = _CATEGORICAL[path]
    if path == "patient.hrt":
        return Cmp(path, rng.choice(("=", "!=")), rng.choice(values))
    op = rng.choice(("=", "!=", "in"))
    if op == "in":
        return Cmp(path, "in", tuple(rng.sample(values, rng.randint(1, len(values)))))
    return Cmp(path, op, rng.choice(values))


def _date_leaf(rng: random.Random, path: str) -> Cmp:
    def day():
        return f"{rng.randint(1994, 2007)}-{rng.randint(1, 12):02d}-{rng.randint(1, 28):02d}"
    op = rng.choice(("<", "<=", ">", ">=", "between"))
    if op == "between":
        a, b = sorted((day(), day()))
        return Cmp(path, "between", (a, b))
    return Cmp(path, op, day())


def _derived_leaf(rng: random.Random) -> DerivedCmp:
    if rng.random() < 0.5:
        views = rng.choice((["CC"], ["MLO"], ["CC", "MLO"]))
        feats = {view: [round(rng.uniform(0, 10), 1) for _ in range(8)]
                 for view in views}
        params = {"reference_features": feats, "views": views}
        threshold = round(rng.uniform(0.05, 0.6), 3)
        return DerivedCmp("find_one_like_it", params, rng.choice((">=", ">", "<", "<=")),
                          threshold)
    return DerivedCmp("density_asymmetry", {}, rng.choice((">=", ">", "<", "<=")),
                      round(rng.uniform(0.0, 0.6), 3))


def gen_predicate(rng: random.Random, target: str, depth: int,
                  allow_derived: bool = True):
    if depth <= 1 or rng.random() < 0.35:
        if allow_derived and rng.random() < 0.25:
            return _derived_leaf(rng)
        pool = (_paths_for(target, _NUMERIC) + _paths_for(target, _CATEGORICAL)
                + [p for p in _DATES if p.split(".", 1)[0] in _REACHABLE[target]])
        path = rng.choice(pool)
        if path in _NUMERIC:
            return _numeric_leaf(rng, path)
        if path in _CATEGORICAL:
            return _categorical_leaf(rng, path)
        return _date_leaf(rng, path)
    shape = rng.random()
    if shape < 0.4:
        return And(tuple(gen_predicate(rng, target, depth - 1, allow_derived)
                         for _ in range(rng.randint(2, 3))))
    if shape < 0.8:
        return Or(tuple(gen_predicate(rng, target, depth - 1, allow_derived)
                        for _ in range(rng.randint(2, 3))))
    return Not(gen_predicate(rng, target, depth - 1, allow_derived))


def gen_query(rng: random.Random, origin_site: str, target: str | None = None,
              max_depth: int = 5, allow_derived: bool = True,
              hop_budget: int = 1) -> FormalQuery:
    target = target or rng.choice(("patients", "studies", "images", "annotations"))
    predicate = gen_predicate(rng, target, rng.randint(1, max_depth), allow_derived)
    projection = None
    if rng.random() < 0.2:
        pool = sorted(set(_paths_for(target, _NUMERIC) + _paths_for(target, _CATEGORICAL)))
        projection = tuple(rng.sample(pool, rng.randint(1, min(4, len(pool)))))
    return FormalQuery(target, predicate, projection, Scope(origin_site, hop_budget))
