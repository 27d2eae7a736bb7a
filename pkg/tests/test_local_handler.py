"""Statement plans, execution semantics, providers, and the naive-evaluation oracle."""

from __future__ import annotations

import json
import random
import threading

import pytest

import gendata
import genq
import oracle
from mammofed.local_handler import (CompileError, ExecutionError, FilterStep,
                                    ProviderRegistry, ResolvePathStep, ScanStep,
                                    compile_statements, default_providers,
                                    density_asymmetry, run_formal_query, similarity)
from mammofed.query import And, Cmp, Const, DerivedCmp, FormalQuery, Not, Scope
from mammofed.records import SiteStore
from mammofed.translator import load_default_dictionary, translate

DICT = load_default_dictionary()


def store_from(objs, site="A"):
    store = SiteStore(site)
    report = store.ingest_lines(gendata.to_lines(objs))
    assert not report.rejected, report.rejected
    return store


def q_of(predicate, target="images", projection=None):
    return FormalQuery(target, predicate, projection, Scope("A", 0))


# -- compilation --

def test_age_band_plan_resolves_the_patient_join():
    q = translate("find images where age between 50 and 55", DICT, "A")
    p = compile_statements(q)
    kinds = [type(s).__name__ for s in p.steps]
    assert kinds == ["ScanStep", "ResolvePathStep", "FilterStep", "ProjectStep"]
    assert p.steps[0] == ScanStep("images")
    assert p.steps[1] == ResolvePathStep("studies", "patients")


def test_patient_only_query_needs_no_resolve():
    q = translate("find patients where age > 50", DICT, "A")
    p = compile_statements(q)
    assert [type(s).__name__ for s in p.steps] == ["ScanStep", "FilterStep", "ProjectStep"]


def test_derived_filter_comes_after_the_simple_filter():
    q = q_of(And((Cmp("image.view", "=", "MLO"),
                  DerivedCmp("find_one_like_it", {"reference": "I1"}, ">=", 0.5))))
    p = compile_statements(q)
    kinds = [type(s).__name__ for s in p.steps]
    assert kinds == ["ScanStep", "FilterStep", "DerivedFilterStep", "ProjectStep"]
    fil = p.steps[1]
    assert isinstance(fil, FilterStep)
    # the derived leaf is relaxed to a positive constant in the simple filter
    assert fil.predicate == And((Cmp("image.view", "=", "MLO"), Const(True)))


def test_relaxation_respects_negation_parity():
    q = q_of(Not(DerivedCmp("density_asymmetry", {}, ">", 0.2)), target="studies")
    p = compile_statements(q)
    fil = next(s for s in p.steps if isinstance(s, FilterStep))
    assert fil.predicate == Not(Const(False))


def test_unknown_path_is_a_compile_error():
    with pytest.raises(CompileError):
        compile_statements(q_of(Cmp("image.nope", "=", 1)))
    with pytest.raises(CompileError):
        compile_statements(q_of(Cmp("image.view", "=", "MLO"), target="patients"))


# -- execution basics --

def test_empty_store_executes_to_empty_rows():
    store = SiteStore("A")
    rs = run_formal_query(q_of(Cmp("image.view", "=", "MLO")), store, default_providers())
    assert rs.rows == ()
    assert rs.source_version == 0
    assert rs.site_id == "A"


def _age_fixture():
    objs = []
    for i, age in enumerate((49, 52, 56)):
        pid = f"P{i}"
        objs.append({"entity": "patient", "patient_id": pid, "age_years": age,
                     "children_count": 0, "hrt": False})
        objs.append({"entity": "study", "study_id": f"S{i}", "patient_id": pid,
                     "study_date": "2003-01-01", "reader_ids": []})
        objs.append({"entity": "image", "image_id": f"I{i}", "study_id": f"S{i}",
                     "laterality": "L", "view": "MLO", "breast_area_mm2": 8000.0,
                     "mean_density": 0.4,
                     "feature_vector": [float(i)] * 8})
    return objs


def test_age_band_selects_exactly_the_matching_patients_images():
    objs = _age_fixture()
    store = store_from(objs)
    q = translate("find images where age between 50 and 55", DICT, "A")
    rs = run_formal_query(q, store, default_providers())
    got = {(r.entity, r.id) for r in rs.rows}
    # brute-force oracle over the raw dicts
    tables = gendata.build_tables(objs)
    want = {(e, i) for e, i, _ in oracle.evaluate(q, tables)}
    assert got == want == {("images", "I1")}


def test_similarity_threshold_one_matches_identical_vectors_only():
    objs = _age_fixture()
    store = store_from(objs)
    q = q_of(DerivedCmp("find_one_like_it", {"reference": "I1"}, ">=", 1.0))
    rs = run_formal_query(q, store, default_providers())
    assert {r.id for r in rs.rows} == {"I1"}


def test_missing_provider_is_an_execution_error_naming_it():
    objs = _age_fixture()
    store = store_from(objs)
    q = q_of(DerivedCmp("mystery", {}, ">", 0.0))
    with pytest.raises(ExecutionError, match="mystery"):
        run_formal_query(q, store, ProviderRegistry())


# -- providers --

def test_similarity_of_identical_vectors_is_exactly_one():
    assert similarity((1, 2, 3), (1, 2, 3)) == 1.0


def test_similarity_single_coordinate_gap_of_three():
    # distance 3 -> 1 / (1 + 3)
    a = (0, 0, 0, 0, 0, 0, 0, 0)
    b = (3, 0, 0, 0, 0, 0, 0, 0)
    assert similarity(a, b) == 0.25


def test_asymmetry_zero_for_equal_densities():
    objs = [
        {"entity": "patient", "patient_id": "P", "age_years": 50,
         "children_count": 0, "hrt": False},
        {"entity": "study", "study_id": "S", "patient_id": "P",
         "study_date": "2000-01-01", "reader_ids": []},
        {"entity": "image", "image_id": "L1", "study_id": "S", "laterality": "L",
         "view": "MLO", "breast_area_mm2": 1.0, "mean_density": 0.30,
         "feature_vector": [0.0] * 8},
        {"entity": "image", "image_id": "R1", "study_id": "S", "laterality": "R",
         "view": "MLO", "breast_area_mm2": 1.0, "mean_density": 0.30,
         "feature_vector": [0.0] * 8},
    ]
    store = store_from(objs)
    snap = store.snapshot()
    study = snap.tables["studies"]["S"]
    assert density_asymmetry({}, study, "studies", snap.tables) == 0.0


def test_asymmetry_undefined_without_both_sides_excludes_and_counts():
    objs = _age_fixture()  # every study has a single L image
    store = store_from(objs)
    q = q_of(DerivedCmp("density_asymmetry", {}, ">=", 0.0), target="studies")
    rs = run_formal_query(q, store, default_providers())
    assert rs.rows == ()
    assert rs.skipped == 3


def test_undefined_derived_under_negation_still_excludes():
    objs = _age_fixture()
    store = store_from(objs)
    q = q_of(Not(DerivedCmp("density_asymmetry", {}, ">", 0.5)), target="studies")
    rs = run_formal_query(q, store, default_providers())
    assert rs.rows == ()
    assert rs.skipped == 3


# -- the oracle-equivalence property --

def test_execution_matches_naive_evaluation_on_random_stores():
    providers = default_providers()
    rng = random.Random(0xFED)
    for trial in range(40):
        objs = gendata.gen_site_records(rng, "A", n_patients=rng.randint(2, 14))
        store = store_from(objs)
        tables = gendata.build_tables(objs)
        q = genq.gen_query(rng, "A", hop_budget=0)
        rs = run_formal_query(q, store, providers)
        got = oracle.engine_rows_site_blind(rs.rows)
        want = oracle.evaluate(q, tables)
        assert got == want, f"trial {trial}: {q}"


def test_projection_order_follows_the_request():
    objs = _age_fixture()
    store = store_from(objs)
    q = q_of(Cmp("image.view", "=", "MLO"),
             projection=("image.view", "patient.age_years", "image.image_id"))
    rs = run_formal_query(q, store, default_providers())
    assert [p for p, _ in rs.rows[0].fields] == ["image.view", "patient.age_years",
                                                 "image.image_id"]


def test_snapshot_consistency_under_concurrent_ingest():
    providers = default_providers()
    store = SiteStore("A")
    q = translate("find patients local where age > 0", DICT, "A")
    matching_by_version = {0: 0}
    stop = threading.Event()
    bad: list[str] = []

    def reader():
        while not stop.is_set():
            rs = run_formal_query(q, store, providers)
            expected = matching_by_version.get(rs.source_version)
            if expected is None:
                continue
            if len(rs.rows) != expected:
                bad.append(f"v{rs.source_version}: {len(rs.rows)} rows != {expected}")
                return

    threads = [threading.Thread(target=reader) for _ in range(3)]
    for t in threads:
        t.start()
    for i in range(40):
        obj = {"entity": "patient", "patient_id": f"P{i:03d}",
               "age_years": 30 + i % 50, "children_count": 0, "hrt": False}
        report = store.ingest_lines([json.dumps(obj)])
        matching_by_version[report.new_version] = i + 1
    stop.set()
    for t in threads:
        t.join()
    assert not bad, bad
